use crate::diffnum::{DiffError, Tape, Tensor, Var};
use crate::rng::Stream;

/// Index of a tensor in a [`ParamStore`]; also its position in the `Var`
/// slice returned by [`ParamStore::bind`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a `rows x cols` weight drawn uniformly from `+-1/sqrt(cols)`.
    pub(crate) fn add_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut Stream) -> ParamId {
        self.add_uniform(name, &[rows, cols], cols, rng)
    }

    /// Uniform in `+-1/sqrt(fan_in)`.
    pub(crate) fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Stream) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("nonzero shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a tensor's values; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), DiffError> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(DiffError::dimension("param set", cur.shape(), value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Mutable flat view of every tensor, in store order.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.tensors.iter_mut().map(|t| t.data_mut())
    }

    /// Registers every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>, DiffError> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Like [`bind`](Self::bind) but as constants, for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> Result<Vec<Var>, DiffError> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub(crate) fn names_and_tensors_mut(&mut self) -> (&[String], &mut [Tensor]) {
        (&self.names, &mut self.tensors)
    }
}
