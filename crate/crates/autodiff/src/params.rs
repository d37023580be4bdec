use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::AutodiffError;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Adam moment slots, shape-matched to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlots {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

/// Named parameters in insertion order, plus optimizer state.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    adam: Option<AdamSlots>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, AutodiffError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.adam = None;
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, AutodiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, AutodiffError> {
        Ok(&self.values[self.id(name)?.0])
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn adam(&self) -> Option<&AdamSlots> {
        self.adam.as_ref()
    }

    pub(crate) fn adam_or_init(&mut self) -> (&mut Vec<Tensor>, &mut AdamSlots) {
        if self.adam.is_none() {
            let zeros: Vec<Tensor> = self
                .values
                .iter()
                .map(|v| Tensor::zeros(v.rows(), v.cols()))
                .collect();
            self.adam = Some(AdamSlots {
                first: zeros.clone(),
                second: zeros,
                step: 0,
            });
        }
        let adam = self.adam.as_mut().expect("initialized above");
        (&mut self.values, adam)
    }

    pub fn set_adam(&mut self, slots: AdamSlots) -> Result<(), AutodiffError> {
        for ((v, m), s) in self.values.iter().zip(&slots.first).zip(&slots.second) {
            if !v.same_shape(m) || !v.same_shape(s) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "set_adam",
                    lhs: v.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        if slots.first.len() != self.values.len() || slots.second.len() != self.values.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_adam",
                lhs: vec![self.values.len()],
                rhs: vec![slots.first.len(), slots.second.len()],
            });
        }
        self.adam = Some(slots);
        Ok(())
    }
}

/// Truncated normal (re-drawn beyond two standard deviations).
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        let z = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        *v = z * std;
    }
    t
}
