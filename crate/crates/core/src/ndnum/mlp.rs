use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, MatRef, Tensor2};
use crate::error::{Error, Result};

/// Weights of a fully connected ReLU network.
///
/// Parameters live in one flat buffer. Layer `l` maps `sizes[l]` inputs to
/// `sizes[l + 1]` outputs and stores its `sizes[l] x sizes[l + 1]` row-major
/// weight followed by its bias. Hidden layers use ReLU; the last layer emits
/// raw logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    sizes: Vec<usize>,
    values: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn layer_ranges(sizes: &[usize], layer: usize) -> (Range<usize>, Range<usize>) {
    let offset = param_count(&sizes[..=layer]);
    let (fan_in, fan_out) = (sizes[layer], sizes[layer + 1]);
    let w_end = offset + fan_in * fan_out;
    (offset..w_end, w_end..w_end + fan_out)
}

impl MlpParams {
    /// All-zero network with the given layer widths (input, hidden..., classes).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!(
                "an MLP needs at least two non-zero layer widths, got {sizes:?}"
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            values: vec![0.0; param_count(sizes)],
        })
    }

    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init_he(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut params = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..params.num_layers() {
            let limit = (6.0 / sizes[l] as f64).sqrt();
            for w in params.weight_mut(l) {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(params)
    }

    /// Rebuilds parameters from a width list and a flat value buffer.
    pub fn from_flat(sizes: &[usize], values: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(sizes)?;
        if values.len() != params.values.len() {
            return Err(Error::Shape(format!(
                "{} values for a network with {} parameters",
                values.len(),
                params.values.len()
            )));
        }
        params.values = values;
        Ok(params)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        &self.values[layer_ranges(&self.sizes, layer).0]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = layer_ranges(&self.sizes, layer).0;
        &mut self.values[r]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.values[layer_ranges(&self.sizes, layer).1]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = layer_ranges(&self.sizes, layer).1;
        &mut self.values[r]
    }

    /// Flat-buffer ranges holding weights (biases excluded).
    pub fn weight_ranges(&self) -> Vec<Range<usize>> {
        (0..self.num_layers())
            .map(|l| layer_ranges(&self.sizes, l).0)
            .collect()
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.sizes == other.sizes
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_shape(&self, other: &MlpParams, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: layer widths {:?} vs {:?}",
                self.sizes, other.sizes
            )))
        }
    }
}

/// Gradient buffer laid out exactly like an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    inner: MlpParams,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            inner: MlpParams {
                sizes: params.sizes.clone(),
                values: vec![0.0; params.values.len()],
            },
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.inner.sizes
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.inner.values
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        self.inner.weight(layer)
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        self.inner.bias(layer)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.is_finite()
    }

    pub fn matches(&self, params: &MlpParams) -> bool {
        self.inner.same_shape(params)
    }
}

/// Layer activations kept from a forward pass for the backward pass.
///
/// `activations[0]` is the input batch, `activations[l]` the post-ReLU output
/// of hidden layer `l`, and the last entry holds the logits.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    activations: Vec<Tensor2>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor2 {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn into_logits(mut self) -> Tensor2 {
        self.activations.pop().expect("cache holds at least the input")
    }
}

fn check_input(params: &MlpParams, batch: &Tensor2) -> Result<()> {
    if batch.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, network expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn dense(params: &MlpParams, layer: usize, input: &Tensor2, relu: bool) -> Tensor2 {
    let fan_in = params.sizes[layer];
    let fan_out = params.sizes[layer + 1];
    let rows = input.rows();
    let bias = params.bias(layer);
    let mut out = Tensor2::zeros(rows, fan_out);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(bias);
    }
    gemm(
        rows,
        fan_in,
        fan_out,
        MatRef::row_major(input.as_slice(), fan_in),
        MatRef::row_major(params.weight(layer), fan_out),
        out.as_mut_slice(),
        1.0,
    );
    if relu {
        out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

pub fn forward_cached(params: &MlpParams, batch: &Tensor2) -> Result<ForwardCache> {
    check_input(params, batch)?;
    let layers = params.num_layers();
    let mut activations = Vec::with_capacity(layers + 1);
    activations.push(batch.clone());
    for l in 0..layers {
        let next = dense(params, l, &activations[l], l + 1 < layers);
        activations.push(next);
    }
    Ok(ForwardCache { activations })
}

/// Logits for every row of `batch`.
pub fn mlp_forward(params: &MlpParams, batch: &Tensor2) -> Result<Tensor2> {
    check_input(params, batch)?;
    let layers = params.num_layers();
    let mut current = dense(params, 0, batch, layers > 1);
    for l in 1..layers {
        current = dense(params, l, &current, l + 1 < layers);
    }
    Ok(current)
}

/// Backpropagates `upstream` (dLoss/dlogits) through a cached forward pass.
pub fn backward_cached(
    params: &MlpParams,
    cache: &ForwardCache,
    upstream: &Tensor2,
) -> Result<Gradients> {
    let logits = cache.logits();
    if upstream.rows() != logits.rows() || upstream.cols() != logits.cols() {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, logits are {}x{}",
            upstream.rows(),
            upstream.cols(),
            logits.rows(),
            logits.cols()
        )));
    }
    let rows = upstream.rows();
    let mut grads = Gradients::zeros_like(params);
    let mut delta = upstream.clone();
    for l in (0..params.num_layers()).rev() {
        let fan_in = params.sizes[l];
        let fan_out = params.sizes[l + 1];
        let input = &cache.activations[l];
        let (w_range, b_range) = layer_ranges(&params.sizes, l);

        gemm(
            fan_in,
            rows,
            fan_out,
            MatRef::transposed(input.as_slice(), fan_in),
            MatRef::row_major(delta.as_slice(), fan_out),
            &mut grads.inner.values[w_range],
            0.0,
        );
        let gb = &mut grads.inner.values[b_range];
        for r in delta.row_iter() {
            gb.iter_mut().zip(r).for_each(|(g, d)| *g += d);
        }

        if l > 0 {
            let mut prev = Tensor2::zeros(rows, fan_in);
            gemm(
                rows,
                fan_out,
                fan_in,
                MatRef::row_major(delta.as_slice(), fan_out),
                MatRef::transposed(params.weight(l), fan_out),
                prev.as_mut_slice(),
                0.0,
            );
            // ReLU derivative, read off the stored post-activation.
            prev.as_mut_slice()
                .iter_mut()
                .zip(input.as_slice())
                .for_each(|(d, &a)| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = prev;
        }
    }
    Ok(grads)
}

/// Parameter gradients of a loss whose logit gradient is `upstream`.
pub fn mlp_backward(params: &MlpParams, batch: &Tensor2, upstream: &Tensor2) -> Result<Gradients> {
    let cache = forward_cached(params, batch)?;
    backward_cached(params, &cache, upstream)
}
