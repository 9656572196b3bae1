use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a registered parameter segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentId(pub(crate) usize);

impl SegmentId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, contiguous slice of the flat parameter vector, viewed as a
/// row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat storage for every trainable weight plus a same-shape gradient
/// accumulator. Segments are appended, so they never overlap.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    grads: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment holding `values` (row-major, `rows * cols` long).
    pub fn register(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<SegmentId> {
        let name = name.into();
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "segment `{name}` declared {rows}x{cols} but got {} values",
                values.len()
            )));
        }
        if self.find(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate segment `{name}`")));
        }
        let offset = self.values.len();
        self.values.extend_from_slice(&values);
        self.grads.resize(self.values.len(), 0.0);
        self.segments.push(Segment {
            name,
            offset,
            rows,
            cols,
        });
        Ok(SegmentId(self.segments.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<SegmentId> {
        self.segments
            .iter()
            .position(|s| s.name == name)
            .map(SegmentId)
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn seg_values(&self, id: SegmentId) -> &[f64] {
        &self.values[self.segments[id.0].range()]
    }

    pub fn seg_values_mut(&mut self, id: SegmentId) -> &mut [f64] {
        let range = self.segments[id.0].range();
        &mut self.values[range]
    }

    pub fn seg_grads(&self, id: SegmentId) -> &[f64] {
        &self.grads[self.segments[id.0].range()]
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `delta` into the gradient accumulator.
    pub fn accumulate(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.grads.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} does not match {} parameters",
                delta.len(),
                self.grads.len()
            )));
        }
        self.grads.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
        Ok(())
    }
}
