//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each group draws random configurations, builds a scalar objective
//! `L = Σ cotangent · output` (or the loss itself for the loss layer and the
//! toy network), and compares the backward pass against central differences.
//! Coordinates whose perturbation flips a ReLU mask or a max-pool winner are
//! skipped, because the objective is not differentiable there.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gabor::{kernel_param_grads, make_kernel, GaborParamSet, GaborParams};
use crate::layers::{
    ConvLayer, DenseLayer, DropoutLayer, GaborConvLayer, Layer, ReluLayer, SoftmaxCrossEntropy,
};
use crate::rng;
use crate::tensor::{self, ConvGeometry, Tensor4};
use crate::train::network::{build_network, NetworkSpec};

pub const TOLERANCE: f64 = 1e-4;
pub const EPSILON: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero in
/// both computations do not divide by zero.
pub const REL_FLOOR: f64 = 1e-3;

pub const GROUPS: &[&str] = &[
    "tensor.conv2d",
    "tensor.maxpool",
    "tensor.relu",
    "layers.dense",
    "layers.conv",
    "layers.relu",
    "layers.dropout",
    "layers.softmax_ce",
    "gabor.kernel",
    "layers.gabor_conv",
    "network.toy",
];

const LAYER_CONFIGS: usize = 20;
const KERNEL_DRAWS: usize = 50;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Group filter, see [`group_matches`].
    pub group: Option<String>,
    /// Perturbs every analytic gradient (`1.01·g + 0.01`) before comparing,
    /// as a negative control for the harness itself.
    pub corrupt: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub group: &'static str,
    pub configs: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Where the maximum occurred.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= TOLERANCE
    }
}

/// A filter selects a group by full name, by one dot-separated part, or by
/// one word of a part (`gabor` selects `gabor.kernel` and `layers.gabor_conv`).
pub fn group_matches(group: &str, filter: &str) -> bool {
    group == filter
        || group.split('.').any(|part| part == filter)
        || group.split(['.', '_']).any(|word| word == filter)
}

pub fn run(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let selected: Vec<&'static str> = match &opts.group {
        None => GROUPS.to_vec(),
        Some(f) => GROUPS
            .iter()
            .copied()
            .filter(|g| group_matches(g, f))
            .collect(),
    };
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "unknown gradcheck group `{}`; known: {}",
            opts.group.as_deref().unwrap_or(""),
            GROUPS.join(", ")
        )));
    }
    selected.into_iter().map(|g| run_group(g, opts)).collect()
}

pub fn run_group(group: &'static str, opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut acc = Accum {
        result: CheckResult {
            group,
            configs: 0,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        },
        corrupt: opts.corrupt,
    };
    let gi = GROUPS
        .iter()
        .position(|g| *g == group)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck group `{group}`")))?;
    let mut rng = rng::stream(opts.seed, &[0x6772_6164, gi as u64]);
    match group {
        "tensor.conv2d" => check_conv2d(&mut rng, &mut acc)?,
        "tensor.maxpool" => check_maxpool(&mut rng, &mut acc)?,
        "tensor.relu" => check_relu_fn(&mut rng, &mut acc)?,
        "layers.dense" => check_dense(&mut rng, &mut acc)?,
        "layers.conv" => check_conv_layer(&mut rng, &mut acc)?,
        "layers.relu" => check_relu_layer(&mut rng, &mut acc)?,
        "layers.dropout" => check_dropout(&mut rng, &mut acc)?,
        "layers.softmax_ce" => check_softmax_ce(&mut rng, &mut acc)?,
        "gabor.kernel" => check_gabor_kernel(&mut rng, &mut acc)?,
        "layers.gabor_conv" => check_gabor_conv(&mut rng, &mut acc)?,
        "network.toy" => check_toy_network(&mut rng, &mut acc)?,
        _ => unreachable!("group list and dispatch agree"),
    }
    Ok(acc.result)
}

struct Accum {
    result: CheckResult,
    corrupt: bool,
}

impl Accum {
    fn compare(&mut self, analytic: f64, numeric: f64, site: impl FnOnce() -> String) {
        let analytic = if self.corrupt {
            analytic * 1.01 + 1e-2
        } else {
            analytic
        };
        let err = rel_err(analytic, numeric);
        self.result.checked += 1;
        if err > self.result.max_rel_err || !err.is_finite() {
            self.result.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.result.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", site());
        }
    }

    /// Central differences of `f` around `values`, compared with `analytic`.
    /// `f` returns the objective and an activation signature; a signature
    /// change between the two sides marks a kink and skips the coordinate.
    fn check_coords(
        &mut self,
        label: &str,
        values: &[f64],
        analytic: &[f64],
        mut f: impl FnMut(&[f64]) -> Result<(f64, u64)>,
    ) -> Result<()> {
        assert_eq!(values.len(), analytic.len(), "{label}: gradient length");
        let (_, base_sig) = f(values)?;
        let mut work = values.to_vec();
        for i in 0..values.len() {
            work[i] = values[i] + EPSILON;
            let (plus, sig_plus) = f(&work)?;
            work[i] = values[i] - EPSILON;
            let (minus, sig_minus) = f(&work)?;
            work[i] = values[i];
            if sig_plus != base_sig || sig_minus != base_sig {
                self.result.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * EPSILON);
            self.compare(analytic[i], numeric, || format!("{label}[{i}]"));
        }
        Ok(())
    }
}

fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_vec(shape, random_vec(shape.iter().product(), rng)).expect("sized")
}

fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(shape: [usize; 4], data: &[f64]) -> Tensor4 {
    Tensor4::from_vec(shape, data.to_vec()).expect("sized")
}

fn hash_of<T: Hash>(v: T) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

fn layer_signature(layer: &dyn Layer) -> u64 {
    let mut h = DefaultHasher::new();
    layer.activation_signature(&mut h);
    h.finish()
}

/// Checks the input gradient and every parameter gradient of `layer` under
/// the objective `Σ cot · forward(input)`.
fn check_layer(
    label: &str,
    layer: &mut dyn Layer,
    input: &Tensor4,
    training: bool,
    check_input: bool,
    rng: &mut ChaCha8Rng,
    acc: &mut Accum,
) -> Result<()> {
    let out = layer.forward(input, training)?;
    let cot = random_tensor(out.shape(), rng);
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let grad_in = layer.backward(&cot)?;
    let shape = input.shape();
    if check_input {
        acc.check_coords(
            &format!("{label}.input"),
            input.data(),
            grad_in.data(),
            |x| {
                let y = layer.forward(&with_data(shape, x), training)?;
                Ok((dot(&y, &cot), layer_signature(layer)))
            },
        )?;
    }
    let params: Vec<(&'static str, Vec<f64>, Vec<f64>)> = layer
        .params()
        .iter()
        .map(|p| (p.name, p.value.clone(), p.grad.clone()))
        .collect();
    for (pi, (name, value, grad)) in params.iter().enumerate() {
        acc.check_coords(&format!("{label}.{name}"), value, grad, |v| {
            layer.params_mut()[pi].value.copy_from_slice(v);
            let y = layer.forward(input, training)?;
            Ok((dot(&y, &cot), layer_signature(layer)))
        })?;
        layer.params_mut()[pi].value.copy_from_slice(value);
    }
    Ok(())
}

fn random_geometry(rng: &mut ChaCha8Rng, kernels: &[usize]) -> ConvGeometry {
    let k = kernels[rng.random_range(0..kernels.len())];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=2);
    ConvGeometry::new(k, stride, padding).expect("odd kernel, positive stride")
}

fn check_conv2d(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    for cfg in 0..LAYER_CONFIGS {
        let geom = random_geometry(rng, &[1, 3, 5]);
        let k = geom.kernel;
        let (n, c_in, c_out) = (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let (h, w) = (rng.random_range(k..=k + 4), rng.random_range(k..=k + 4));
        let input = random_tensor([n, c_in, h, w], rng);
        let kernels = random_tensor([c_out, c_in, k, k], rng);
        let bias = random_vec(c_out, rng);
        let out = tensor::conv2d_forward(&input, &kernels, &bias, &geom)?;
        let cot = random_tensor(out.shape(), rng);
        let grads = tensor::conv2d_backward(&input, &kernels, &geom, &cot)?;
        let label = format!("cfg{cfg}");
        let grad_input = grads.input.expect("input gradient requested");
        acc.check_coords(
            &format!("{label}.input"),
            input.data(),
            grad_input.data(),
            |x| {
                let y =
                    tensor::conv2d_forward(&with_data(input.shape(), x), &kernels, &bias, &geom)?;
                Ok((dot(&y, &cot), 0))
            },
        )?;
        acc.check_coords(
            &format!("{label}.kernels"),
            kernels.data(),
            grads.kernels.data(),
            |kv| {
                let y =
                    tensor::conv2d_forward(&input, &with_data(kernels.shape(), kv), &bias, &geom)?;
                Ok((dot(&y, &cot), 0))
            },
        )?;
        acc.check_coords(&format!("{label}.bias"), &bias, &grads.bias, |b| {
            let y = tensor::conv2d_forward(&input, &kernels, b, &geom)?;
            Ok((dot(&y, &cot), 0))
        })?;
        acc.result.configs += 1;
    }
    Ok(())
}

fn check_maxpool(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    for cfg in 0..LAYER_CONFIGS {
        let window = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let shape = [
            rng.random_range(1..=2),
            rng.random_range(1..=2),
            rng.random_range(window..=7),
            rng.random_range(window..=7),
        ];
        let input = random_tensor(shape, rng);
        let (out, argmax) = tensor::maxpool2d(&input, window, stride)?;
        let cot = random_tensor(out.shape(), rng);
        let grad = tensor::maxpool2d_backward(&cot, &argmax, shape)?;
        acc.check_coords(&format!("cfg{cfg}.input"), input.data(), grad.data(), |x| {
            let (y, idx) = tensor::maxpool2d(&with_data(shape, x), window, stride)?;
            Ok((dot(&y, &cot), hash_of(&idx)))
        })?;
        acc.result.configs += 1;
    }
    Ok(())
}

fn relu_mask(x: &[f64]) -> u64 {
    hash_of(x.iter().map(|v| *v > 0.0).collect::<Vec<_>>())
}

fn check_relu_fn(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    for cfg in 0..LAYER_CONFIGS {
        let shape = [
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        ];
        let input = random_tensor(shape, rng);
        let cot = random_tensor(shape, rng);
        let grad = tensor::relu_backward(&input, &cot)?;
        acc.check_coords(&format!("cfg{cfg}.input"), input.data(), grad.data(), |x| {
            let y = tensor::relu_forward(&with_data(shape, x));
            Ok((dot(&y, &cot), relu_mask(x)))
        })?;
        acc.result.configs += 1;
    }
    Ok(())
}

fn check_relu_layer(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    for cfg in 0..LAYER_CONFIGS {
        let shape = [
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        ];
        let input = random_tensor(shape, rng);
        let mut layer = ReluLayer::default();
        check_layer(
            &format!("cfg{cfg}"),
            &mut layer,
            &input,
            true,
            true,
            rng,
            acc,
        )?;
        acc.result.configs += 1;
    }
    Ok(())
}

fn check_dense(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    for cfg in 0..LAYER_CONFIGS {
        let shape = [
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        ];
        let inputs = shape[1] * shape[2] * shape[3];
        let outputs = rng.random_range(1..=6);
        let mut layer = DenseLayer::from_weights(
            inputs,
            outputs,
            random_vec(inputs * outputs, rng),
            random_vec(outputs, rng),
        );
        let input = random_tensor(shape, rng);
        check_layer(
            &format!("cfg{cfg}"),
            &mut layer,
            &input,
            true,
            true,
            rng,
            acc,
        )?;
        acc.result.configs += 1;
    }
    Ok(())
}

fn check_conv_layer(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    for cfg in 0..LAYER_CONFIGS {
        let geom = random_geometry(rng, &[1, 3, 5]);
        let k = geom.kernel;
        let (c_in, c_out) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let mut layer = ConvLayer::from_weights(
            c_in,
            c_out,
            geom,
            random_vec(c_out * c_in * k * k, rng),
            random_vec(c_out, rng),
        );
        let input = random_tensor(
            [
                rng.random_range(1..=2),
                c_in,
                rng.random_range(k..=k + 4),
                rng.random_range(k..=k + 4),
            ],
            rng,
        );
        check_layer(
            &format!("cfg{cfg}"),
            &mut layer,
            &input,
            true,
            true,
            rng,
            acc,
        )?;
        acc.result.configs += 1;
    }
    Ok(())
}

fn check_dropout(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    for cfg in 0..LAYER_CONFIGS {
        let p = rng.random_range(0.0..0.8);
        let mut layer = DropoutLayer::new(p, rng.random())?;
        layer.set_rng_key(rng.random());
        let shape = [
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        ];
        let input = random_tensor(shape, rng);
        check_layer(
            &format!("cfg{cfg}(p={p:.3})"),
            &mut layer,
            &input,
            true,
            true,
            rng,
            acc,
        )?;
        acc.result.configs += 1;
    }
    Ok(())
}

fn check_softmax_ce(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    for cfg in 0..LAYER_CONFIGS {
        let (n, classes) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let shape = [n, classes, 1, 1];
        let logits = Tensor4::from_vec(
            shape,
            random_vec(n * classes, rng)
                .iter()
                .map(|v| 3.0 * v)
                .collect(),
        )?;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut loss = SoftmaxCrossEntropy::new();
        loss.forward(&logits, &labels)?;
        let grad = loss.backward()?;
        acc.check_coords(
            &format!("cfg{cfg}.logits"),
            logits.data(),
            grad.data(),
            |z| Ok((loss.forward(&with_data(shape, z), &labels)?, 0)),
        )?;
        acc.result.configs += 1;
    }
    Ok(())
}

fn random_gabor(rng: &mut ChaCha8Rng) -> GaborParams {
    GaborParams::new(
        rng.random_range(0.2..3.0),
        rng.random_range(-PI..PI),
        rng.random_range(-PI..PI),
        rng.random_range(0.8..5.0),
    )
}

/// Per-pixel derivatives of the synthesized kernel.
fn check_gabor_kernel(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    const SIZES: [usize; 4] = [3, 5, 7, 11];
    for draw in 0..KERNEL_DRAWS {
        let k = SIZES[draw % SIZES.len()];
        let p = random_gabor(rng);
        let grads = kernel_param_grads(&p, k)?;
        let analytic = [&grads.omega, &grads.theta, &grads.psi, &grads.sigma];
        for (which, name) in ["omega", "theta", "psi", "sigma"].iter().enumerate() {
            let nudged = |delta: f64| {
                let mut q = p;
                match which {
                    0 => q.omega += delta,
                    1 => q.theta += delta,
                    2 => q.psi += delta,
                    _ => q.sigma += delta,
                }
                make_kernel(&q, k)
            };
            let plus = nudged(EPSILON)?;
            let minus = nudged(-EPSILON)?;
            for (px, (a, (kp, km))) in analytic[which]
                .iter()
                .zip(plus.iter().zip(&minus))
                .enumerate()
            {
                let numeric = (kp - km) / (2.0 * EPSILON);
                acc.compare(*a, numeric, || format!("draw{draw}(k={k}).d{name}[{px}]"));
            }
        }
        acc.result.configs += 1;
    }
    Ok(())
}

fn check_gabor_conv(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    const SIZES: [usize; 3] = [3, 5, 11];
    for cfg in 0..LAYER_CONFIGS {
        let k = SIZES[cfg % SIZES.len()];
        let (c_out, c_in) = (rng.random_range(1..=4), rng.random_range(1..=2));
        let params = (0..c_out * c_in).map(|_| random_gabor(rng)).collect();
        let set = GaborParamSet::new(c_out, c_in, k, params)?;
        let stride = rng.random_range(1..=2);
        let padding = if rng.random() { k / 2 } else { 0 };
        let mut layer = GaborConvLayer::new(&set, stride, padding)?;
        for (b, v) in layer
            .params_mut()
            .into_iter()
            .last()
            .expect("bias")
            .value
            .iter_mut()
            .zip(random_vec(c_out, rng))
        {
            *b = v;
        }
        let input = random_tensor(
            [
                rng.random_range(1..=2),
                c_in,
                rng.random_range(k..=k + 3),
                rng.random_range(k..=k + 3),
            ],
            rng,
        );
        check_layer(
            &format!("cfg{cfg}(k={k})"),
            &mut layer,
            &input,
            true,
            true,
            rng,
            acc,
        )?;
        acc.result.configs += 1;
    }
    Ok(())
}

/// GaborConv(k=5) → ReLU → MaxPool → Dense → softmax cross-entropy on a
/// 12×12 single-channel input, every parameter checked through the loss.
fn check_toy_network(rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
    let classes = 3;
    let spec = NetworkSpec::parse(
        "gabor_conv(4,5,1,2) relu maxpool(2,2) dense(classes) softmax_ce",
        [1, 12, 12],
        classes,
        rng.random(),
    )?;
    let mut net = build_network(&spec)?;
    let input = random_tensor([2, 1, 12, 12], rng);
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..classes)).collect();
    net.zero_grad();
    let logits = net.forward(&input, true)?;
    net.loss(&logits, &labels)?;
    net.backward()?;
    let names = net.param_names();
    let snapshot: Vec<(Vec<f64>, Vec<f64>)> = net
        .params()
        .iter()
        .map(|p| (p.value.clone(), p.grad.clone()))
        .collect();
    for (pi, (value, grad)) in snapshot.iter().enumerate() {
        acc.check_coords(&names[pi], value, grad, |v| {
            net.params_mut()[pi].value.copy_from_slice(v);
            let logits = net.forward(&input, true)?;
            let loss = net.loss(&logits, &labels)?;
            Ok((loss, net.activation_signature()))
        })?;
        net.params_mut()[pi].value.copy_from_slice(value);
    }
    acc.result.configs += 1;
    Ok(())
}
