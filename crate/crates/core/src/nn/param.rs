use rand::Rng;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// A trainable tensor with its gradient and Adadelta accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Running average of squared gradients.
    pub sq_grad: Tensor<T>,
    /// Running average of squared updates.
    pub sq_delta: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.dims());
        Self {
            name: name.into(),
            grad: zeros.clone(),
            sq_grad: zeros.clone(),
            sq_delta: zeros,
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Batch-norm running mean and variance (not trained by the optimizer).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Running stats for `n` features, starting at mean 0 and variance 1.
    pub fn add_stats(&mut self, name: impl Into<String>, n: usize) -> StatsId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: vec![T::zero(); n],
            var: vec![T::one(); n],
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0]
    }

    pub fn all_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Same store in another precision (values, gradients and accumulators).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    sq_grad: p.sq_grad.cast(),
                    sq_delta: p.sq_delta.cast(),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    name: s.name.clone(),
                    mean: s.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Uniform initialization in `±√(6/(fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    dims: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(dims, |_| T::from_f64(rng.gen_range(-bound..bound)))
}
