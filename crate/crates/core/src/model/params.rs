use jova_tensor::{Checkpoint, Tape, Tensor, Var};

use super::ModelError;

/// Named parameter tensors in a fixed registration order. The order is the
/// order of gradients, optimizer moments, and checkpoint records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: String, value: Tensor) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.values[i])
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a gradient-tracking leaf of `tape`.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        let dtype = tape.dtype();
        self.values
            .iter()
            .map(|v| tape.param(v.clone().with_dtype(dtype)))
            .collect()
    }

    /// Registers every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &Tape) -> Vec<Var> {
        let dtype = tape.dtype();
        self.values
            .iter()
            .map(|v| tape.constant(v.clone().with_dtype(dtype)))
            .collect()
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<(), ModelError> {
        for (n, v) in self.names.iter().zip(&self.values) {
            ckpt.push_tensor(format!("{prefix}{n}"), v)?;
        }
        Ok(())
    }

    /// Overwrites every parameter from `ckpt`, requiring matching shapes.
    pub fn read_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<(), ModelError> {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            let t = ckpt.require(&format!("{prefix}{n}"))?.to_tensor();
            if t.shape() != v.shape() {
                return Err(ModelError::Shape(format!(
                    "parameter {n}: checkpoint has {:?}, model expects {:?}",
                    t.shape(),
                    v.shape()
                )));
            }
            *v = t;
        }
        Ok(())
    }
}
