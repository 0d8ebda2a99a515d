use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_a_bt, matmul_at_b};
use super::{NnError, ParamArray, ParameterSet, Tensor};

/// Nonlinearity applied after every hidden layer. The output layer is
/// always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "all layer dims must be positive, got {:?}",
                self.layer_dims()
            )));
        }
        Ok(())
    }

    /// `[input, hidden..., output]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layer_dims()
            .windows(2)
            .enumerate()
            .flat_map(|(l, w)| {
                [
                    (format!("layer{l}.weight"), vec![w[0], w[1]]),
                    (format!("layer{l}.bias"), vec![w[1]]),
                ]
            })
            .collect()
    }
}

/// Dense feedforward network. Layer `l` computes `a W_l + b_l` with `W_l`
/// stored `(d_in x d_out)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: ParameterSet,
}

/// Intermediate values from a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (layer 0 input is the batch itself).
    inputs: Vec<Tensor>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Tensor>,
}

impl ForwardCache {
    pub fn batch(&self) -> &Tensor {
        &self.inputs[0]
    }

    pub fn batch_len(&self) -> usize {
        self.inputs[0].rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub param_grads: ParameterSet,
    pub input_grads: Tensor,
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Network, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrays = spec
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let data = if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..shape[0] * shape[1])
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect()
            } else {
                vec![0.0; shape[0]]
            };
            ParamArray { name, shape, data }
        })
        .collect();
    Ok(Network {
        spec: spec.clone(),
        params: ParameterSet::new(arrays)?,
    })
}

impl Network {
    pub fn from_params(spec: NetworkSpec, params: ParameterSet) -> Result<Self, NnError> {
        spec.validate()?;
        let expected = spec.param_shapes();
        if expected.len() != params.arrays().len()
            || expected
                .iter()
                .zip(params.arrays())
                .any(|((_, s), a)| *s != a.shape)
        {
            return Err(NnError::Shape(format!(
                "parameters do not match network layout {:?}",
                spec.layer_dims()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParameterSet) -> Result<(), NnError> {
        self.params.check_aligned(&params)?;
        self.params = params;
        Ok(())
    }

    fn weight(&self, l: usize) -> &ParamArray {
        &self.params.arrays()[2 * l]
    }

    fn bias(&self, l: usize) -> &ParamArray {
        &self.params.arrays()[2 * l + 1]
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), NnError> {
        if batch.shape().len() != 2 || batch.cols() != self.spec.input_dim {
            return Err(NnError::Shape(format!(
                "expected batch (n x {}), got {:?}",
                self.spec.input_dim,
                batch.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.forward_cached(batch)?.0)
    }

    pub fn forward_cached(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache), NnError> {
        self.check_input(batch)?;
        let n = batch.rows();
        let dims = self.spec.layer_dims();
        let last = self.spec.num_layers() - 1;
        let mut inputs = vec![batch.clone()];
        let mut pre_activations = Vec::with_capacity(last);
        for l in 0..=last {
            let (din, dout) = (dims[l], dims[l + 1]);
            let mut z = matmul(inputs[l].data(), n, din, &self.weight(l).data, dout);
            let b = &self.bias(l).data;
            for row in z.chunks_exact_mut(dout) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
            let z = Tensor::matrix(n, dout, z)?;
            if l == last {
                if !z.is_finite() {
                    return Err(NnError::Numeric("non-finite network output".into()));
                }
                return Ok((z, ForwardCache { inputs, pre_activations }));
            }
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            pre_activations.push(z);
            inputs.push(a);
        }
        unreachable!("network has at least one layer")
    }

    /// Reverse-mode gradients of `<output, output_grad>`.
    pub fn backward(&self, batch: &Tensor, output_grad: &Tensor) -> Result<GradientBundle, NnError> {
        let (_, cache) = self.forward_cached(batch)?;
        self.backward_cached(&cache, output_grad)
    }

    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        output_grad: &Tensor,
    ) -> Result<GradientBundle, NnError> {
        let n = cache.batch_len();
        let dims = self.spec.layer_dims();
        if output_grad.shape() != [n, self.spec.output_dim] {
            return Err(NnError::Shape(format!(
                "output gradient {:?} does not match ({} x {})",
                output_grad.shape(),
                n,
                self.spec.output_dim
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut delta = output_grad.data().to_vec();
        for l in (0..self.spec.num_layers()).rev() {
            let (din, dout) = (dims[l], dims[l + 1]);
            if l + 1 < self.spec.num_layers() {
                // relu'(z) on the hidden layer feeding layer l+1
                for (d, z) in delta.iter_mut().zip(cache.pre_activations[l].data()) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = cache.inputs[l].data();
            grads.arrays_mut()[2 * l].data = matmul_at_b(input, n, din, &delta, dout);
            let bias_grad = &mut grads.arrays_mut()[2 * l + 1].data;
            for row in delta.chunks_exact(dout) {
                for (g, d) in bias_grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
            delta = matmul_a_bt(&delta, n, dout, &self.weight(l).data, din);
        }
        Ok(GradientBundle {
            param_grads: grads,
            input_grads: Tensor::matrix(n, dims[0], delta)?,
        })
    }
}
