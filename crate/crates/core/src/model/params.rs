use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::model::ops::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named parameter tensors backed by one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<T>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            specs: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a zero-initialized tensor and returns its range.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Range<usize> {
        let spec = ParamSpec {
            name: name.into(),
            shape,
            offset: self.values.len(),
        };
        let r = spec.range();
        self.values.resize(r.end, T::zero());
        self.specs.push(spec);
        r
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    /// Rebuilds a store from specs and values, checking that they agree.
    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<T>) -> Option<Self> {
        let mut expected = 0;
        for s in &specs {
            if s.offset != expected {
                return None;
            }
            expected += s.len();
        }
        (expected == values.len()).then_some(ParamStore { specs, values })
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::from(*v).expect("cast"))
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}
