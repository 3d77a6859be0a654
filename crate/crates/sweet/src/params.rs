//! Ordered, name-addressed parameter collections. Iteration order is the
//! insertion order, which makes optimizer sweeps and checkpoint layouts
//! deterministic.

use crate::error::{Result, SweetError};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, DenseTensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, value: DenseTensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(SweetError::Contract(format!("duplicate parameter {name}")));
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DenseTensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| SweetError::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseTensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| SweetError::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseTensor)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Rounds every entry through f32, the storage precision. Used at the
    /// factor-to-model materialization boundary so that weights recomputed
    /// from a saved checkpoint are bit-identical to the in-memory ones.
    pub fn snap_to_f32(&mut self) {
        for (_, v) in self.entries.iter_mut() {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

impl FromIterator<(String, DenseTensor)> for ParamSet {
    fn from_iter<T: IntoIterator<Item = (String, DenseTensor)>>(iter: T) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}
