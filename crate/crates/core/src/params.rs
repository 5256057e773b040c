use crate::error::{shape_err, Result};
use crate::tensor::{ParamId, Tensor};

/// Named parameter tensors of one model.
///
/// Towers that share weights hold [`ParamId`]s into the same store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.values
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (v, n))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }
}
