use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    /// Leaky ReLU with slope 0.2, used by every auxiliary network.
    pub const AUXILIARY: Activation = Activation::LeakyRelu { slope: 0.2 };

    pub fn apply<'t, T: Scalar>(&self, x: Var<'t, T>) -> Var<'t, T> {
        match *self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu { slope } => x.leaky_relu(T::lit(slope)),
        }
    }
}

/// Serializable architecture descriptor; [`Model::new`] builds the layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected layers `dims[0] -> dims[1] -> … -> dims[n]`, with
    /// the activation between layers (none after the last). Inputs of any
    /// rank are flattened after the batch axis.
    Mlp { dims: Vec<usize>, activation: Activation },
    /// Residual CNN: a 3×3 stem convolution, `blocks` pre-activation
    /// residual blocks and, when `classes` is set, global average pooling
    /// plus a linear classifier. With `downsample`, the second half of the
    /// blocks runs at twice the width and half the resolution.
    ResNet {
        input: [usize; 3],
        width: usize,
        blocks: usize,
        classes: Option<usize>,
        downsample: bool,
        activation: Activation,
    },
    /// Same-resolution convolutional head producing `outputs` channels.
    ConvHead {
        channels: usize,
        hidden: usize,
        outputs: usize,
        blocks: usize,
        activation: Activation,
    },
    /// Global average pooling followed by a linear classifier.
    PoolHead { channels: usize, classes: usize },
}

#[derive(Clone, Debug)]
enum Layer {
    Dense { weight: usize, bias: usize },
    Conv { weight: usize, bias: usize, stride: usize },
    Residual {
        conv1: (usize, usize),
        conv2: (usize, usize),
        shortcut: Option<(usize, usize)>,
        stride: usize,
        activation: Activation,
    },
    Act(Activation),
    GlobalAvgPool,
    Flatten,
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered layers with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    arch: Architecture,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
}

struct Builder<'a, T> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    /// He-uniform weights, bound `sqrt(6 / fan_in)`.
    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.random_range(-bound..bound)))
            .collect();
        self.params.push(Param {
            name,
            value: Tensor::from_raw(shape, data),
        });
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.params.push(Param {
            name,
            value: Tensor::zeros(shape),
        });
        self.params.len() - 1
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Layer {
        Layer::Dense {
            weight: self.weight(format!("{prefix}.weight"), vec![fan_in, fan_out], fan_in),
            bias: self.zeros(format!("{prefix}.bias"), vec![fan_out]),
        }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize) -> (usize, usize) {
        (
            self.weight(format!("{prefix}.weight"), vec![cout, cin, 3, 3], cin * 9),
            self.zeros(format!("{prefix}.bias"), vec![cout, 1, 1]),
        )
    }

    fn residual(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        activation: Activation,
    ) -> Layer {
        let conv1 = self.conv(&format!("{prefix}.conv1"), cin, cout);
        let conv2 = self.conv(&format!("{prefix}.conv2"), cout, cout);
        let shortcut = (cin != cout || stride != 1)
            .then(|| self.conv(&format!("{prefix}.shortcut"), cin, cout));
        Layer::Residual {
            conv1,
            conv2,
            shortcut,
            stride,
            activation,
        }
    }
}

fn nonzero(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::invalid(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

impl<T: Scalar> Model<T> {
    /// Builds the architecture with seeded He-uniform initialization.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
        };
        let mut layers = Vec::new();
        match &arch {
            Architecture::Mlp { dims, activation } => {
                if dims.len() < 2 {
                    return Err(Error::invalid("mlp needs at least input and output dims"));
                }
                for &d in dims {
                    nonzero("mlp dimension", d)?;
                }
                layers.push(Layer::Flatten);
                for i in 0..dims.len() - 1 {
                    if i > 0 {
                        layers.push(Layer::Act(*activation));
                    }
                    layers.push(b.dense(&format!("dense{i}"), dims[i], dims[i + 1]));
                }
            }
            Architecture::ResNet {
                input,
                width,
                blocks,
                classes,
                downsample,
                activation,
            } => {
                nonzero("resnet width", *width)?;
                nonzero("resnet input channels", input[0])?;
                let (w, bias) = b.conv("stem", input[0], *width);
                layers.push(Layer::Conv { weight: w, bias, stride: 1 });
                let mut channels = *width;
                let split = if *downsample { blocks / 2 } else { usize::MAX };
                for i in 0..*blocks {
                    let (cout, stride) = if i == split && i > 0 {
                        (channels * 2, 2)
                    } else {
                        (channels, 1)
                    };
                    layers.push(b.residual(&format!("block{i}"), channels, cout, stride, *activation));
                    channels = cout;
                }
                if let Some(classes) = classes {
                    nonzero("classes", *classes)?;
                    layers.push(Layer::Act(*activation));
                    layers.push(Layer::GlobalAvgPool);
                    layers.push(b.dense("fc", channels, *classes));
                }
            }
            Architecture::ConvHead {
                channels,
                hidden,
                outputs,
                blocks,
                activation,
            } => {
                nonzero("head channels", *channels)?;
                nonzero("head hidden", *hidden)?;
                nonzero("head outputs", *outputs)?;
                let (w, bias) = b.conv("in", *channels, *hidden);
                layers.push(Layer::Conv { weight: w, bias, stride: 1 });
                for i in 0..*blocks {
                    layers.push(b.residual(&format!("block{i}"), *hidden, *hidden, 1, *activation));
                }
                layers.push(Layer::Act(*activation));
                let (w, bias) = b.conv("out", *hidden, *outputs);
                layers.push(Layer::Conv { weight: w, bias, stride: 1 });
            }
            Architecture::PoolHead { channels, classes } => {
                nonzero("head channels", *channels)?;
                nonzero("classes", *classes)?;
                layers.push(Layer::GlobalAvgPool);
                layers.push(b.dense("fc", *channels, *classes));
            }
        }
        let params = b.params;
        Ok(Self {
            arch,
            layers,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces all parameter values; shapes must match.
    pub fn set_tensors(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(
                    "set_tensors",
                    format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape()),
                ));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binds the parameters as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Binds the parameters as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    pub fn forward<'t>(&self, x: Var<'t, T>, params: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        Ok(self.forward_taps(x, params)?.0)
    }

    /// Forward pass that also returns the pre-activation output of every
    /// parameterized layer, in order.
    pub fn forward_taps<'t>(
        &self,
        x: Var<'t, T>,
        params: &[Var<'t, T>],
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "model has {} parameters, {} bound",
                self.params.len(),
                params.len()
            )));
        }
        let conv = |h: Var<'t, T>, (w, b): (usize, usize), stride: usize| -> Result<Var<'t, T>> {
            h.conv2d(params[w], stride)?.add(params[b])
        };
        let mut taps = Vec::new();
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Flatten => h.flatten()?,
                Layer::Dense { weight, bias } => {
                    let out = h.matmul(params[*weight])?.add(params[*bias])?;
                    taps.push(out);
                    out
                }
                Layer::Conv { weight, bias, stride } => {
                    let out = conv(h, (*weight, *bias), *stride)?;
                    taps.push(out);
                    out
                }
                Layer::Residual {
                    conv1,
                    conv2,
                    shortcut,
                    stride,
                    activation,
                } => {
                    let a = conv(activation.apply(h), *conv1, *stride)?;
                    let f = conv(activation.apply(a), *conv2, 1)?;
                    let skip = match shortcut {
                        Some(s) => conv(h, *s, *stride)?,
                        None => h,
                    };
                    let out = f.add(skip)?;
                    taps.push(out);
                    out
                }
                Layer::Act(a) => a.apply(h),
                Layer::GlobalAvgPool => {
                    let s = h.shape();
                    if s.len() != 4 {
                        return Err(Error::shape("global_avg_pool", format!("{s:?}")));
                    }
                    let plane = s[2] * s[3];
                    h.reshape(&[s[0], s[1], plane])?
                        .sum_to(&[s[0], s[1], 1])?
                        .scale(T::one() / T::from_usize(plane).expect("size"))
                        .reshape(&[s[0], s[1]])?
                }
            };
        }
        Ok((h, taps))
    }

    /// Convenience inference pass on a fresh tape.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let params = self.bind_frozen(&tape);
        let out = self.forward(tape.constant(x.clone()), &params)?;
        tape.check_finite()?;
        Ok((*out.value()).clone())
    }

    /// Number of ReLU and leaky-ReLU applications in one forward pass.
    pub fn activation_counts(&self) -> (usize, usize) {
        let mut relu = 0;
        let mut leaky = 0;
        let mut count = |a: &Activation, n: usize| match a {
            Activation::Relu => relu += n,
            Activation::LeakyRelu { .. } => leaky += n,
        };
        for layer in &self.layers {
            match layer {
                Layer::Act(a) => count(a, 1),
                Layer::Residual { activation, .. } => count(activation, 2),
                _ => {}
            }
        }
        (relu, leaky)
    }

    /// Output channel count of every convolution, in order.
    pub fn conv_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, .. } => out.push(self.params[*weight].value.shape()[0]),
                Layer::Residual { conv1, conv2, .. } => {
                    out.push(self.params[conv1.0].value.shape()[0]);
                    out.push(self.params[conv2.0].value.shape()[0]);
                }
                _ => {}
            }
        }
        out
    }
}

/// Residual classifier for `input` images.
pub fn build_resnet_small(input: [usize; 3], classes: usize, width: usize, blocks: usize) -> Architecture {
    Architecture::ResNet {
        input,
        width,
        blocks,
        classes: Some(classes),
        downsample: true,
        activation: Activation::Relu,
    }
}

/// Auxiliary classifier over gradient tensors shaped like `input`: the same
/// residual topology with leaky ReLU (slope 0.2) everywhere.
pub fn build_aux_classifier(input: [usize; 3], classes: usize, width: usize, blocks: usize) -> Architecture {
    Architecture::ResNet {
        input,
        width,
        blocks,
        classes: Some(classes),
        downsample: true,
        activation: Activation::AUXILIARY,
    }
}

/// Shared encoder with task-specific decoders.
#[derive(Clone, Debug)]
pub struct MultiHeadModel<T> {
    pub encoder: Model<T>,
    pub decoders: Vec<Model<T>>,
}

impl<T: Scalar> MultiHeadModel<T> {
    /// Checks with a dry run that every decoder accepts the encoder output
    /// for inputs shaped `input` (without the batch axis).
    pub fn new(encoder: Model<T>, decoders: Vec<Model<T>>, input: &[usize]) -> Result<Self> {
        let mut shape = vec![1];
        shape.extend_from_slice(input);
        let tape = Tape::new();
        let enc = encoder.bind_frozen(&tape);
        let f = encoder.forward(tape.constant(Tensor::zeros(shape)), &enc)?;
        for (i, d) in decoders.iter().enumerate() {
            let p = d.bind_frozen(&tape);
            d.forward(f, &p).map_err(|e| {
                Error::invalid(format!("decoder {i} rejects encoder output {:?}: {e}", f.shape()))
            })?;
        }
        Ok(Self { encoder, decoders })
    }
}
