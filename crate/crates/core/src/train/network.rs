use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::gabor::init_param_set;
use crate::layers::{
    ConvLayer, DenseLayer, DropoutLayer, GaborConvLayer, Layer, MaxPoolLayer, Param, ReluLayer,
    SampleShape, SoftmaxCrossEntropy,
};
use crate::rng;
use crate::tensor::{ConvGeometry, Tensor4};

/// Architecture text of the default desk-scale GCNN; `classes` is replaced by
/// the dataset's class count.
pub const DEFAULT_GCNN: &str = "gabor_conv(40,11,1,5) relu maxpool(2,2) conv(20,3,1,1) relu \
                                maxpool(2,2) dropout(0.5) dense(128) relu dense(classes) softmax_ce";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    GaborConv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dropout {
        p: f64,
    },
    Dense {
        out: usize,
    },
    SoftmaxCe,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerSpec::GaborConv { .. } | LayerSpec::Conv { .. } | LayerSpec::Dense { .. }
        )
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::GaborConv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "gabor_conv({out_channels},{kernel},{stride},{padding})"),
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv({out_channels},{kernel},{stride},{padding})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool { window, stride } => write!(f, "maxpool({window},{stride})"),
            LayerSpec::Dropout { p } => write!(f, "dropout({p})"),
            LayerSpec::Dense { out } => write!(f, "dense({out})"),
            LayerSpec::SoftmaxCe => f.write_str("softmax_ce"),
        }
    }
}

/// Declarative network: per-sample input shape, ordered layers, init seed.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input: SampleShape,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

fn parse_args(token: &str, args: &str, expected: usize) -> Result<Vec<String>> {
    let parts: Vec<String> = args.split(',').map(|s| s.trim().to_string()).collect();
    if parts.len() != expected || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "layer `{token}` takes {expected} argument(s)"
        )));
    }
    Ok(parts)
}

fn parse_count(token: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("layer `{token}`: `{value}` is not a count")))
}

impl LayerSpec {
    fn parse(token: &str, classes: usize) -> Result<LayerSpec> {
        let (name, args) = match token.find('(') {
            Some(open) if token.ends_with(')') => {
                (&token[..open], &token[open + 1..token.len() - 1])
            }
            Some(_) => return Err(Error::Config(format!("unbalanced layer token `{token}`"))),
            None => (token, ""),
        };
        let counts = |n: usize| -> Result<Vec<usize>> {
            parse_args(token, args, n)?
                .iter()
                .map(|v| parse_count(token, v))
                .collect()
        };
        let no_args = |spec: LayerSpec| {
            if args.is_empty() {
                Ok(spec)
            } else {
                Err(Error::Config(format!("layer `{name}` takes no arguments")))
            }
        };
        match name {
            "gabor_conv" | "conv" => {
                let v = counts(4)?;
                let (out_channels, kernel, stride, padding) = (v[0], v[1], v[2], v[3]);
                Ok(if name == "conv" {
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    }
                } else {
                    LayerSpec::GaborConv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    }
                })
            }
            "maxpool" => {
                let v = counts(2)?;
                Ok(LayerSpec::MaxPool {
                    window: v[0],
                    stride: v[1],
                })
            }
            "dropout" => {
                let v = parse_args(token, args, 1)?;
                let p = v[0].parse().map_err(|_| {
                    Error::Config(format!("dropout rate `{}` is not a number", v[0]))
                })?;
                Ok(LayerSpec::Dropout { p })
            }
            "dense" => {
                let v = parse_args(token, args, 1)?;
                let out = if v[0] == "classes" {
                    classes
                } else {
                    parse_count(token, &v[0])?
                };
                Ok(LayerSpec::Dense { out })
            }
            "relu" => no_args(LayerSpec::Relu),
            "softmax_ce" => no_args(LayerSpec::SoftmaxCe),
            other => Err(Error::Config(format!("unknown layer type `{other}`"))),
        }
    }
}

impl NetworkSpec {
    /// Parses whitespace-separated layer tokens such as
    /// `gabor_conv(40,11,1,5) relu maxpool(2,2) dense(classes) softmax_ce`.
    pub fn parse(text: &str, input: SampleShape, classes: usize, seed: u64) -> Result<Self> {
        let layers = text
            .split_whitespace()
            .map(|t| LayerSpec::parse(t, classes))
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        Ok(NetworkSpec {
            input,
            layers,
            seed,
        })
    }

    pub fn default_gcnn(input: SampleShape, classes: usize, seed: u64) -> Self {
        Self::parse(DEFAULT_GCNN, input, classes, seed).expect("default architecture parses")
    }

    pub fn layer_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn has_gabor(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::GaborConv { .. }))
    }

    /// The same network with the Gabor layer replaced by a standard
    /// convolution of identical channel count and geometry.
    pub fn cnn_twin(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::GaborConv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                other => other,
            })
            .collect();
        NetworkSpec {
            layers,
            ..self.clone()
        }
    }

    fn check_structure(&self) -> Result<()> {
        let gabors: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::GaborConv { .. }))
            .map(|(i, _)| i)
            .collect();
        if gabors.len() > 1 {
            return Err(Error::Config(format!(
                "at most one gabor_conv layer is allowed, found {}",
                gabors.len()
            )));
        }
        if let Some(&g) = gabors.first() {
            let first_param = self.layers.iter().position(|l| l.is_parameterized());
            if first_param != Some(g) {
                return Err(Error::Config(
                    "gabor_conv must be the first parameterized layer".into(),
                ));
            }
        }
        let last = self.layers.len() - 1;
        if self.layers[last] != LayerSpec::SoftmaxCe {
            return Err(Error::Config("network must end with softmax_ce".into()));
        }
        if self.layers[..last].contains(&LayerSpec::SoftmaxCe) {
            return Err(Error::Config("softmax_ce may only appear last".into()));
        }
        Ok(())
    }

    /// Per-sample shape after every layer (excluding the loss), starting
    /// with the input.
    pub fn shape_chain(&self) -> Result<Vec<SampleShape>> {
        build_network(self).map(|n| n.shapes)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.layer_string())
    }
}

/// Layers plus the fused loss, in order.
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Box<dyn Layer>>,
    loss: SoftmaxCrossEntropy,
    shapes: Vec<SampleShape>,
}

fn instantiate(
    spec: &LayerSpec,
    index: usize,
    input: SampleShape,
    seed: u64,
) -> Result<Box<dyn Layer>> {
    let tags = [rng::TAG_WEIGHTS, index as u64];
    Ok(match *spec {
        LayerSpec::GaborConv {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let set = init_param_set(
                out_channels,
                input[0],
                kernel,
                rng::derive_seed(seed, &tags),
            )?;
            Box::new(GaborConvLayer::new(&set, stride, padding)?)
        }
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            if out_channels == 0 {
                return Err(Error::InvalidArgument("conv needs output channels".into()));
            }
            let geom = ConvGeometry::new(kernel, stride, padding)?;
            Box::new(ConvLayer::new(
                input[0],
                out_channels,
                geom,
                &mut rng::stream(seed, &tags),
            ))
        }
        LayerSpec::Dense { out } => {
            if out == 0 {
                return Err(Error::InvalidArgument("dense needs outputs".into()));
            }
            Box::new(DenseLayer::new(
                input.iter().product(),
                out,
                &mut rng::stream(seed, &tags),
            ))
        }
        LayerSpec::Relu => Box::new(ReluLayer::default()),
        LayerSpec::MaxPool { window, stride } => Box::new(MaxPoolLayer::new(window, stride)?),
        LayerSpec::Dropout { p } => Box::new(DropoutLayer::new(
            p,
            rng::derive_seed(seed, &[rng::TAG_DROPOUT, index as u64]),
        )?),
        LayerSpec::SoftmaxCe => unreachable!("loss is not a layer"),
    })
}

/// Instantiates every layer with seeded initialization and validates the
/// shape chain end to end.
pub fn build_network(spec: &NetworkSpec) -> Result<Network> {
    spec.check_structure()?;
    let body = &spec.layers[..spec.layers.len() - 1];
    let mut shapes = vec![spec.input];
    let mut layers: Vec<Box<dyn Layer>> = Vec::with_capacity(body.len());
    let chain = |shapes: &[SampleShape]| {
        let mut parts = vec![format!("input {:?}", shapes[0])];
        for (l, s) in body.iter().zip(&shapes[1..]) {
            parts.push(format!("{l} {s:?}"));
        }
        parts.join(" -> ")
    };
    for (i, ls) in body.iter().enumerate() {
        let input = *shapes.last().expect("non-empty");
        let built = instantiate(ls, i, input, spec.seed)
            .and_then(|layer| layer.output_shape(input).map(|out| (layer, out)));
        match built {
            Ok((layer, out)) => {
                layers.push(layer);
                shapes.push(out);
            }
            Err(e) => {
                return Err(Error::Shape(format!(
                    "layer {i} `{ls}` cannot take input {input:?} ({e}); inferred so far: {}",
                    chain(&shapes)
                )))
            }
        }
    }
    let first_param = layers.iter_mut().find(|l| !l.params().is_empty());
    if let Some(first) = first_param {
        first.set_input_grad(false);
    }
    Ok(Network {
        spec: spec.clone(),
        layers,
        loss: SoftmaxCrossEntropy::new(),
        shapes,
    })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }

    pub fn shapes(&self) -> &[SampleShape] {
        &self.shapes
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s.iter().product()).unwrap_or(0)
    }

    /// Logits for a batch.
    pub fn forward(&mut self, input: &Tensor4, training: bool) -> Result<Tensor4> {
        let [_, c, h, w] = input.shape();
        if [c, h, w] != self.spec.input {
            return Err(Error::Shape(format!(
                "network expects samples of shape {:?}, got {:?}",
                self.spec.input,
                [c, h, w]
            )));
        }
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, training)?;
        }
        Ok(x)
    }

    /// Mean cross-entropy of logits from the last [`forward`](Self::forward).
    pub fn loss(&mut self, logits: &Tensor4, labels: &[usize]) -> Result<f64> {
        self.loss.forward(logits, labels)
    }

    pub fn sample_losses(&self) -> &[f64] {
        self.loss.sample_losses()
    }

    /// Backpropagates the last loss through every layer, accumulating
    /// parameter gradients.
    pub fn backward(&mut self) -> Result<()> {
        let mut grad = self.loss.backward()?;
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    /// `l{index}.{kind}.{param}` for every parameter tensor, in
    /// [`params`](Self::params) order.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |p| format!("l{i}.{}.{}", l.kind(), p.name))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Learnable scalars in the first parameterized layer.
    pub fn first_layer_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params().iter().map(|p| p.len()).sum::<usize>())
            .find(|&n| n > 0)
            .unwrap_or(0)
    }

    pub fn project(&mut self) {
        for layer in &mut self.layers {
            layer.project();
        }
    }

    pub fn set_rng_key(&mut self, key: u64) {
        for layer in &mut self.layers {
            layer.set_rng_key(key);
        }
    }

    /// Kernel tensor of the first parameterized layer if it is convolutional.
    pub fn first_kernels(&self) -> Option<Tensor4> {
        self.layers
            .iter()
            .find(|l| !l.params().is_empty())
            .and_then(|l| l.kernels())
    }

    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            layer.activation_signature(&mut h);
        }
        h.finish()
    }
}
