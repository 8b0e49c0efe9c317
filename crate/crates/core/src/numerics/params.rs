use std::collections::HashMap;

use super::{NumericsError, Real, Tensor};

/// Index of a segment inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named, ordered parameter segments with paired gradient buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    segments: Vec<Segment<T>>,
    by_name: HashMap<String, SegmentId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            segments: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<SegmentId, NumericsError> {
        if self.by_name.contains_key(name) {
            return Err(NumericsError::DuplicateSegment(name.to_string()));
        }
        let id = SegmentId(self.segments.len());
        let grad = Tensor::zeros(value.shape());
        self.segments.push(Segment {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<SegmentId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment(&self, id: SegmentId) -> &Segment<T> {
        &self.segments[id.0]
    }

    pub fn segment_mut(&mut self, id: SegmentId) -> &mut Segment<T> {
        &mut self.segments[id.0]
    }

    pub fn value(&self, id: SegmentId) -> &Tensor<T> {
        &self.segments[id.0].value
    }

    pub fn grad(&self, id: SegmentId) -> &Tensor<T> {
        &self.segments[id.0].grad
    }

    pub fn segments(&self) -> &[Segment<T>] {
        &self.segments
    }

    pub(crate) fn segments_mut(&mut self) -> &mut [Segment<T>] {
        &mut self.segments
    }

    pub fn iter(&self) -> impl Iterator<Item = (SegmentId, &Segment<T>)> {
        self.segments
            .iter()
            .enumerate()
            .map(|(i, s)| (SegmentId(i), s))
    }

    pub fn parameter_count(&self) -> usize {
        self.segments.iter().map(|s| s.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.segments {
            s.grad.fill_zero();
        }
    }

    /// Replaces the value of a segment, keeping its shape.
    pub fn set_value(&mut self, id: SegmentId, value: Tensor<T>) -> Result<(), NumericsError> {
        let seg = &mut self.segments[id.0];
        if seg.value.shape() != value.shape() {
            return Err(NumericsError::Shape(format!(
                "segment '{}' has shape {:?}, got {:?}",
                seg.name,
                seg.value.shape(),
                value.shape()
            )));
        }
        seg.value = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    name: s.name.clone(),
                    value: s.value.cast(),
                    grad: s.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// True when every segment value is bit-identical to `other`.
    pub fn values_bit_equal(&self, other: &Self) -> bool {
        self.segments.len() == other.segments.len()
            && self.segments.iter().zip(&other.segments).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
