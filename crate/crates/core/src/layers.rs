//! Layer objects with a uniform batch-level forward/backward contract.
//!
//! `backward` must follow a matching `forward`; it returns the gradient with
//! respect to the layer input and *adds* parameter gradients into each
//! [`Param::grad`]. Callers zero the gradients between steps.

use std::hash::Hasher;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gabor::{kernel_param_grads, make_kernel, GaborParamSet, GaborParams};
use crate::rng;
use crate::tensor::{
    self, conv2d_backward_impl, conv2d_forward, gemm, maxpool2d, maxpool2d_backward, ConvGeometry,
    MatRef, Tensor4,
};

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: &'static str, shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            name,
            shape,
            value,
            grad,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Per-sample shape `(c, h, w)`.
pub type SampleShape = [usize; 3];

pub trait Layer {
    /// Stable identifier used in checkpoints and error messages.
    fn kind(&self) -> &'static str;

    fn output_shape(&self, input: SampleShape) -> Result<SampleShape>;

    fn forward(&mut self, input: &Tensor4, training: bool) -> Result<Tensor4>;

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    /// Re-establishes parameter constraints after an update.
    fn project(&mut self) {}

    /// The first layer never needs its input gradient.
    fn set_input_grad(&mut self, _needed: bool) {}

    /// Keys the layer's random stream for the next forward pass.
    fn set_rng_key(&mut self, _key: u64) {}

    /// Hashes the discrete state chosen in the last forward (ReLU masks,
    /// pooling winners) so finite-difference checks can detect kink crossings.
    fn activation_signature(&self, _state: &mut dyn Hasher) {}

    /// Materialized first-layer style kernels, for filter export.
    fn kernels(&self) -> Option<Tensor4> {
        None
    }
}

fn conv_output_shape(
    input: SampleShape,
    c_in: usize,
    c_out: usize,
    geom: &ConvGeometry,
) -> Result<SampleShape> {
    if input[0] != c_in {
        return Err(Error::Shape(format!(
            "expects {c_in} input channels, got {}",
            input[0]
        )));
    }
    let (oh, ow) = geom.output_dims(input[1], input[2])?;
    Ok([c_out, oh, ow])
}

/// Convolution whose kernels are synthesized from `(ω, θ, ψ, σ)` per slice on
/// every forward pass. Only those four scalars per slice and the biases are
/// learnable.
pub struct GaborConvLayer {
    c_out: usize,
    c_in: usize,
    geom: ConvGeometry,
    omega: Param,
    theta: Param,
    psi: Param,
    sigma: Param,
    bias: Param,
    input_grad: bool,
    cache: Option<(Tensor4, Tensor4)>,
}

impl GaborConvLayer {
    pub fn new(set: &GaborParamSet, stride: usize, padding: usize) -> Result<Self> {
        let geom = ConvGeometry::new(set.kernel_size(), stride, padding)?;
        let shape = vec![set.c_out(), set.c_in()];
        let column = |f: fn(&GaborParams) -> f64| set.params().iter().map(f).collect::<Vec<_>>();
        Ok(GaborConvLayer {
            c_out: set.c_out(),
            c_in: set.c_in(),
            geom,
            omega: Param::new("omega", shape.clone(), column(|p| p.omega)),
            theta: Param::new("theta", shape.clone(), column(|p| p.theta)),
            psi: Param::new("psi", shape.clone(), column(|p| p.psi)),
            sigma: Param::new("sigma", shape, column(|p| p.sigma)),
            bias: Param::new("bias", vec![set.c_out()], vec![0.0; set.c_out()]),
            input_grad: true,
            cache: None,
        })
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias.value
    }

    fn slice_params(&self, slot: usize) -> GaborParams {
        GaborParams::new(
            self.omega.value[slot],
            self.theta.value[slot],
            self.psi.value[slot],
            self.sigma.value[slot],
        )
    }

    pub fn param_set(&self) -> Result<GaborParamSet> {
        let params = (0..self.c_out * self.c_in)
            .map(|s| self.slice_params(s))
            .collect();
        GaborParamSet::new(self.c_out, self.c_in, self.geom.kernel, params)
    }

    pub fn set_param_set(&mut self, set: &GaborParamSet) -> Result<()> {
        if set.c_out() != self.c_out
            || set.c_in() != self.c_in
            || set.kernel_size() != self.geom.kernel
        {
            return Err(Error::Shape(format!(
                "parameter set {}x{}x{} does not fit layer {}x{}x{}",
                set.c_out(),
                set.c_in(),
                set.kernel_size(),
                self.c_out,
                self.c_in,
                self.geom.kernel
            )));
        }
        for (slot, p) in set.params().iter().enumerate() {
            self.omega.value[slot] = p.omega;
            self.theta.value[slot] = p.theta;
            self.psi.value[slot] = p.psi;
            self.sigma.value[slot] = p.sigma;
        }
        Ok(())
    }

    pub fn materialize(&self) -> Tensor4 {
        let k = self.geom.kernel;
        let mut data = Vec::with_capacity(self.c_out * self.c_in * k * k);
        for slot in 0..self.c_out * self.c_in {
            data.extend(make_kernel(&self.slice_params(slot), k).expect("odd kernel size"));
        }
        Tensor4::from_vec([self.c_out, self.c_in, k, k], data).expect("dense kernel table")
    }
}

impl Layer for GaborConvLayer {
    fn kind(&self) -> &'static str {
        "gabor_conv"
    }

    fn output_shape(&self, input: SampleShape) -> Result<SampleShape> {
        conv_output_shape(input, self.c_in, self.c_out, &self.geom)
    }

    fn forward(&mut self, input: &Tensor4, _training: bool) -> Result<Tensor4> {
        let kernels = self.materialize();
        let out = conv2d_forward(input, &kernels, &self.bias.value, &self.geom)?;
        self.cache = Some((input.clone(), kernels));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let (input, kernels) = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("gabor_conv"))?;
        let grads = conv2d_backward_impl(input, kernels, &self.geom, grad_out, self.input_grad)?;
        let k = self.geom.kernel;
        let area = k * k;
        for slot in 0..self.c_out * self.c_in {
            let dk = &grads.kernels.data()[slot * area..(slot + 1) * area];
            let dp = kernel_param_grads(&self.slice_params(slot), k)?;
            let dot = |d: &[f64]| dk.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
            self.omega.grad[slot] += dot(&dp.omega);
            self.theta.grad[slot] += dot(&dp.theta);
            self.psi.grad[slot] += dot(&dp.psi);
            self.sigma.grad[slot] += dot(&dp.sigma);
        }
        for (g, d) in self.bias.grad.iter_mut().zip(&grads.bias) {
            *g += d;
        }
        Ok(grads.input.unwrap_or_else(|| Tensor4::zeros(input.shape())))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.omega, &self.theta, &self.psi, &self.sigma, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.omega,
            &mut self.theta,
            &mut self.psi,
            &mut self.sigma,
            &mut self.bias,
        ]
    }

    fn project(&mut self) {
        if let Ok(mut set) = self.param_set_unchecked() {
            crate::optim::project_gabor_constraints(&mut set);
            self.set_param_set(&set).expect("same dimensions");
        }
    }

    fn set_input_grad(&mut self, needed: bool) {
        self.input_grad = needed;
    }

    fn kernels(&self) -> Option<Tensor4> {
        Some(self.materialize())
    }
}

impl GaborConvLayer {
    /// Like [`param_set`](Self::param_set) but skips validation, so invalid
    /// values left by an optimizer step can be projected back.
    fn param_set_unchecked(&self) -> Result<GaborParamSet> {
        let params: Vec<_> = (0..self.c_out * self.c_in)
            .map(|s| self.slice_params(s))
            .collect();
        GaborParamSet::from_parts_unchecked(self.c_out, self.c_in, self.geom.kernel, params)
    }
}

/// Standard convolution with freely learnable kernels, He-initialized.
pub struct ConvLayer {
    c_out: usize,
    c_in: usize,
    geom: ConvGeometry,
    weight: Param,
    bias: Param,
    input_grad: bool,
    cache: Option<Tensor4>,
}

impl ConvLayer {
    pub fn new(c_in: usize, c_out: usize, geom: ConvGeometry, rng: &mut ChaCha8Rng) -> Self {
        let k = geom.kernel;
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weights = (0..c_out * c_in * k * k)
            .map(|_| normal.sample(rng))
            .collect();
        Self::from_weights(c_in, c_out, geom, weights, vec![0.0; c_out])
    }

    pub fn from_weights(
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        let k = geom.kernel;
        ConvLayer {
            c_out,
            c_in,
            geom,
            weight: Param::new("weight", vec![c_out, c_in, k, k], weights),
            bias: Param::new("bias", vec![c_out], bias),
            input_grad: true,
            cache: None,
        }
    }

    pub fn kernel_tensor(&self) -> Tensor4 {
        let k = self.geom.kernel;
        Tensor4::from_vec([self.c_out, self.c_in, k, k], self.weight.value.clone())
            .expect("weight shape")
    }
}

impl Layer for ConvLayer {
    fn kind(&self) -> &'static str {
        "conv"
    }

    fn output_shape(&self, input: SampleShape) -> Result<SampleShape> {
        conv_output_shape(input, self.c_in, self.c_out, &self.geom)
    }

    fn forward(&mut self, input: &Tensor4, _training: bool) -> Result<Tensor4> {
        let out = conv2d_forward(input, &self.kernel_tensor(), &self.bias.value, &self.geom)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let input = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("conv"))?;
        let grads = conv2d_backward_impl(
            input,
            &self.kernel_tensor(),
            &self.geom,
            grad_out,
            self.input_grad,
        )?;
        for (g, d) in self.weight.grad.iter_mut().zip(grads.kernels.data()) {
            *g += d;
        }
        for (g, d) in self.bias.grad.iter_mut().zip(&grads.bias) {
            *g += d;
        }
        Ok(grads.input.unwrap_or_else(|| Tensor4::zeros(input.shape())))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn set_input_grad(&mut self, needed: bool) {
        self.input_grad = needed;
    }

    fn kernels(&self) -> Option<Tensor4> {
        Some(self.kernel_tensor())
    }
}

/// Fully connected layer on the flattened sample, output `(n, out, 1, 1)`.
pub struct DenseLayer {
    inputs: usize,
    outputs: usize,
    weight: Param,
    bias: Param,
    cache: Option<Tensor4>,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        let weights = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Self::from_weights(inputs, outputs, weights, vec![0.0; outputs])
    }

    pub fn from_weights(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weight: Param::new("weight", vec![outputs, inputs], weights),
            bias: Param::new("bias", vec![outputs], bias),
            cache: None,
        }
    }
}

impl Layer for DenseLayer {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn output_shape(&self, input: SampleShape) -> Result<SampleShape> {
        let features: usize = input.iter().product();
        if features != self.inputs {
            return Err(Error::Shape(format!(
                "dense expects {} input features, got {features} ({input:?})",
                self.inputs
            )));
        }
        Ok([self.outputs, 1, 1])
    }

    fn forward(&mut self, input: &Tensor4, _training: bool) -> Result<Tensor4> {
        if input.sample_len() != self.inputs {
            return Err(Error::Shape(format!(
                "dense expects {} input features, got {:?}",
                self.inputs,
                input.shape()
            )));
        }
        let n = input.n();
        let mut out = Tensor4::zeros([n, self.outputs, 1, 1]);
        for row in out.data_mut().chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.inputs,
            self.outputs,
            MatRef::row_major(input.data(), self.inputs),
            MatRef::transposed(&self.weight.value, self.inputs),
            1.0,
            out.data_mut(),
        );
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let input = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("dense"))?;
        let n = input.n();
        if grad_out.shape() != [n, self.outputs, 1, 1] {
            return Err(Error::Shape(format!(
                "dense grad_out {:?}, expected {:?}",
                grad_out.shape(),
                [n, self.outputs, 1, 1]
            )));
        }
        gemm(
            self.outputs,
            n,
            self.inputs,
            MatRef::transposed(grad_out.data(), self.outputs),
            MatRef::row_major(input.data(), self.inputs),
            1.0,
            &mut self.weight.grad,
        );
        for row in grad_out.data().chunks_exact(self.outputs) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut grad_in = Tensor4::zeros(input.shape());
        gemm(
            n,
            self.outputs,
            self.inputs,
            MatRef::row_major(grad_out.data(), self.outputs),
            MatRef::row_major(&self.weight.value, self.inputs),
            0.0,
            grad_in.data_mut(),
        );
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Default)]
pub struct ReluLayer {
    cache: Option<Tensor4>,
}

impl Layer for ReluLayer {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn output_shape(&self, input: SampleShape) -> Result<SampleShape> {
        Ok(input)
    }

    fn forward(&mut self, input: &Tensor4, _training: bool) -> Result<Tensor4> {
        self.cache = Some(input.clone());
        Ok(tensor::relu_forward(input))
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let input = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("relu"))?;
        tensor::relu_backward(input, grad_out)
    }

    fn activation_signature(&self, state: &mut dyn Hasher) {
        if let Some(input) = &self.cache {
            for v in input.data() {
                state.write_u8((*v > 0.0) as u8);
            }
        }
    }
}

pub struct MaxPoolLayer {
    window: usize,
    stride: usize,
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPoolLayer {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "pool window and stride must be at least 1".into(),
            ));
        }
        Ok(MaxPoolLayer {
            window,
            stride,
            cache: None,
        })
    }
}

impl Layer for MaxPoolLayer {
    fn kind(&self) -> &'static str {
        "maxpool"
    }

    fn output_shape(&self, input: SampleShape) -> Result<SampleShape> {
        let [c, h, w] = input;
        if self.window > h || self.window > w {
            return Err(Error::Shape(format!(
                "pool window {} larger than {h}x{w}",
                self.window
            )));
        }
        Ok([
            c,
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ])
    }

    fn forward(&mut self, input: &Tensor4, _training: bool) -> Result<Tensor4> {
        let (out, argmax) = maxpool2d(input, self.window, self.stride)?;
        self.cache = Some((input.shape(), argmax));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let (shape, argmax) = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("maxpool"))?;
        maxpool2d_backward(grad_out, argmax, *shape)
    }

    fn activation_signature(&self, state: &mut dyn Hasher) {
        if let Some((_, argmax)) = &self.cache {
            for &i in argmax {
                state.write_usize(i);
            }
        }
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-p)` during training and
/// inference is the identity.
pub struct DropoutLayer {
    p: f64,
    seed: u64,
    key: u64,
    mask: Option<Vec<f64>>,
}

impl DropoutLayer {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        Ok(DropoutLayer {
            p,
            seed,
            key: 0,
            mask: None,
        })
    }
}

impl Layer for DropoutLayer {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn output_shape(&self, input: SampleShape) -> Result<SampleShape> {
        Ok(input)
    }

    fn forward(&mut self, input: &Tensor4, training: bool) -> Result<Tensor4> {
        if !training || self.p == 0.0 {
            self.mask = Some(vec![1.0; input.len()]);
            return Ok(input.clone());
        }
        let mut rng = rng::stream(self.seed, &[rng::TAG_DROPOUT, self.key]);
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..input.len())
            .map(|_| {
                if rng.random::<f64>() < self.p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.mask = Some(mask);
        Tensor4::from_vec(input.shape(), data)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let mask = self
            .mask
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("dropout"))?;
        if mask.len() != grad_out.len() {
            return Err(Error::Shape("dropout grad_out does not match mask".into()));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(g, m)| g * m)
            .collect();
        Tensor4::from_vec(grad_out.shape(), data)
    }

    fn set_rng_key(&mut self, key: u64) {
        self.key = key;
    }
}

/// Fused softmax and mean cross-entropy over the batch.
#[derive(Default)]
pub struct SoftmaxCrossEntropy {
    probs: Option<Tensor4>,
    labels: Vec<usize>,
    sample_losses: Vec<f64>,
}

impl SoftmaxCrossEntropy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mean loss over the batch. Logits are read as `(n, classes)`.
    pub fn forward(&mut self, logits: &Tensor4, labels: &[usize]) -> Result<f64> {
        let n = logits.n();
        let classes = logits.sample_len();
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Vec::with_capacity(logits.len());
        let mut losses = Vec::with_capacity(n);
        for (i, &label) in labels.iter().enumerate() {
            let z = logits.sample(i);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum.ln();
            probs.extend(z.iter().map(|v| (v - log_norm).exp()));
            losses.push(log_norm - z[label]);
        }
        let mean = losses.iter().sum::<f64>() / n as f64;
        self.probs = Some(Tensor4::from_vec(logits.shape(), probs)?);
        self.labels = labels.to_vec();
        self.sample_losses = losses;
        Ok(mean)
    }

    /// `(softmax(logits) - onehot) / n`.
    pub fn backward(&self) -> Result<Tensor4> {
        let probs = self
            .probs
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("softmax_ce"))?;
        let n = probs.n();
        let mut grad = probs.clone();
        for (i, &label) in self.labels.iter().enumerate() {
            let row = grad.sample_mut(i);
            row[label] -= 1.0;
            for v in row.iter_mut() {
                *v /= n as f64;
            }
        }
        Ok(grad)
    }

    pub fn probabilities(&self) -> Option<&Tensor4> {
        self.probs.as_ref()
    }

    pub fn sample_losses(&self) -> &[f64] {
        &self.sample_losses
    }
}
