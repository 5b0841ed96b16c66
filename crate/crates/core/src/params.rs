//! Flat parameter vectors with a named tensor layout.
//!
//! A [`ParamVector`] is the unit exchanged between sites and the coordinator.
//! Values are stored as `f32`; all arithmetic over them (aggregation,
//! regularisers, losses) is carried out in `f64` and rounded once on output.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Whether a tensor is learned by gradient descent or is a tracked statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics. Buffers are
    /// still exchanged and averaged, but receive no gradient.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

impl TensorSpec {
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

/// Ordered `(name, offset, shape)` table. Offsets are contiguous by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<TensorSpec>,
    len: usize,
    trainable: usize,
}

impl Layout {
    /// Builds a layout from `(name, shape, kind)` triples, assigning offsets in order.
    pub fn new<I, S>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<usize>, TensorKind)>,
        S: Into<String>,
    {
        let mut entries: Vec<TensorSpec> = Vec::new();
        let mut offset = 0;
        let mut trainable = 0;
        for (name, shape, kind) in tensors {
            let name = name.into();
            if name.is_empty() {
                return Err(Error::Layout("tensor name must not be empty".into()));
            }
            if entries.iter().any(|e| e.name == name) {
                return Err(Error::Layout(format!("duplicate tensor name {name:?}")));
            }
            let spec = TensorSpec { name, offset, shape, kind };
            offset += spec.len();
            if kind == TensorKind::Trainable {
                trainable += spec.len();
            }
            entries.push(spec);
        }
        Ok(Self { entries, len: offset, trainable })
    }

    /// A single trainable tensor named `theta` of the given length.
    pub fn flat(len: usize) -> Self {
        Self::new([("theta", vec![len], TensorKind::Trainable)]).expect("single tensor layout")
    }

    pub fn entries(&self) -> &[TensorSpec] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total number of scalar slots, buffers included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable
    }

    pub fn trainable_ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.entries
            .iter()
            .filter(|e| e.kind == TensorKind::Trainable)
            .map(TensorSpec::range)
    }

    /// Copies the trainable coordinates of `full` into a dense vector.
    pub fn gather_trainable<T: Copy + Into<f64>>(&self, full: &[T]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable);
        for r in self.trainable_ranges() {
            out.extend(full[r].iter().map(|&v| v.into()));
        }
        out
    }

    /// Adds a dense trainable-only vector back into a full-layout accumulator.
    pub fn scatter_add_trainable(&self, dense: &[f64], full: &mut [f64]) {
        debug_assert_eq!(dense.len(), self.trainable);
        let mut at = 0;
        for r in self.trainable_ranges() {
            let n = r.len();
            for (dst, src) in full[r].iter_mut().zip(&dense[at..at + n]) {
                *dst += *src;
            }
            at += n;
        }
    }
}

/// Flat `f32` vector of every model parameter, tagged with its layout.
#[derive(Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f32>,
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamVector")
            .field("len", &self.values.len())
            .field("tensors", &self.layout.entries().len())
            .finish()
    }
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "layout expects {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    /// Single-tensor vector, convenient for small examples.
    pub fn flat(values: Vec<f32>) -> Self {
        let layout = Arc::new(Layout::flat(values.len()));
        Self { layout, values }
    }

    /// Rounds `f64` values to `f32` storage.
    pub fn from_f64(layout: Arc<Layout>, values: &[f64]) -> Result<Self> {
        Self::new(layout, values.iter().map(|&v| v as f32).collect())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout.get(name).map(|spec| &self.values[spec.range()])
    }

    pub fn trainable_f64(&self) -> Vec<f64> {
        self.layout.gather_trainable(&self.values)
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "incompatible layouts ({} vs {} values)",
                self.len(),
                other.len()
            )))
        }
    }
}

/// `f64` gradient over a parameter layout. Buffer coordinates are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl Gradient {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "layout expects {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn to_param_vector(&self) -> ParamVector {
        ParamVector::from_f64(self.layout.clone(), &self.values).expect("same layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed() -> Arc<Layout> {
        Arc::new(
            Layout::new([
                ("w", vec![2, 2], TensorKind::Trainable),
                ("stat", vec![2], TensorKind::Buffer),
                ("b", vec![2], TensorKind::Trainable),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn offsets_are_contiguous() {
        let layout = mixed();
        assert_eq!(layout.len(), 8);
        assert_eq!(layout.trainable_count(), 6);
        assert_eq!(layout.get("stat").unwrap().range(), 4..6);
        assert_eq!(layout.get("b").unwrap().range(), 6..8);
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = Layout::new([
            ("a", vec![1], TensorKind::Trainable),
            ("a", vec![1], TensorKind::Buffer),
        ]);
        assert!(err.is_err());
    }

    #[test]
    fn gather_and_scatter_skip_buffers() {
        let layout = mixed();
        let full: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let dense = layout.gather_trainable(&full);
        assert_eq!(dense, vec![0.0, 1.0, 2.0, 3.0, 6.0, 7.0]);
        let mut acc = vec![0.0; 8];
        layout.scatter_add_trainable(&dense, &mut acc);
        assert_eq!(acc, vec![0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 6.0, 7.0]);
    }

    #[test]
    fn layout_mismatch_is_detected() {
        let a = ParamVector::zeros(mixed());
        let b = ParamVector::flat(vec![0.0; 8]);
        assert!(a.ensure_same_layout(&b).is_err());
        assert!(ParamVector::new(mixed(), vec![0.0; 7]).is_err());
    }
}
