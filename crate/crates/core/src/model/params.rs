use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered collection of named learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Parameters bound as leaves of one tape, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total number of learnable scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut names = Vec::with_capacity(self.entries.len());
        let mut vars = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            names.push(n.clone());
            vars.push(tape.param(t.clone())?);
        }
        Ok(Bound { names, vars })
    }

    /// Names the given tape leaves (one per entry, in store order).
    pub fn bound_from(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.entries.len(), "one var per parameter");
        Bound {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars: vars.to_vec(),
        }
    }

    /// Per-parameter gradients in store order (zeros where nothing flowed).
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(bound.vars())
            .map(|((_, t), &v)| grads.get_or_zeros(v, t.numel()))
            .collect()
    }

    /// Like [`ParamStore::gradients`], moving the buffers out of `grads`.
    pub fn take_gradients(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(bound.vars())
            .map(|((_, t), &v)| grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    /// Replaces every tensor, checking names and shapes match.
    pub fn assign(&mut self, other: Vec<(String, Tensor)>) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.len()
            )));
        }
        for ((name, t), (oname, ot)) in self.entries.iter().zip(&other) {
            if name != oname {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name}, found {oname}"
                )));
            }
            if t.shape() != ot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: architecture wants {:?}, file has {:?}",
                    t.shape(),
                    ot.shape()
                )));
            }
        }
        self.entries = other;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.entries {
            h.update(n.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
