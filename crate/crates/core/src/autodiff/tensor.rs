use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`](super::Tape).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn tape(&self) -> u64 {
        self.tape
    }
}

/// Dense row-major tensor of `f64` values.
///
/// A tensor produced by a recorded operation carries the [`NodeId`] of that
/// operation; tensors without a node are constants as far as any tape is
/// concerned.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} must contain positive dimensions"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            node: None,
        }
    }

    /// A 1-D tensor. Panics on an empty slice.
    pub fn vector(data: &[f64]) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self {
            shape: vec![data.len()],
            data: data.to_vec(),
            grad: None,
            node: None,
        }
    }

    /// A single-row matrix `[1, n]`, the layout velocity models consume.
    pub fn row(data: &[f64]) -> Self {
        assert!(!data.is_empty(), "row must be non-empty");
        Self {
            shape: vec![1, data.len()],
            data: data.to_vec(),
            grad: None,
            node: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            grad: None,
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
            grad: None,
            node: None,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            node,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape linkage.
    pub fn detach(&self) -> Tensor {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
            node: None,
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            grad: None,
            node: self.node,
        })
    }

    /// Row `r` of a 2-D tensor as an untracked `[1, cols]` tensor.
    pub fn row_at(&self, r: usize) -> Tensor {
        let c = self.cols();
        Tensor::row(&self.data[r * c..(r + 1) * c])
    }

    /// Stacks untracked rows into a `[n, cols]` tensor.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidTensor("cannot stack zero rows".into()))?;
        let cols = first.len();
        let mut data = Vec::with_capacity(cols * rows.len());
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: first.shape.clone(),
                    rhs: r.shape.clone(),
                });
            }
            data.extend_from_slice(&r.data);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }
}
