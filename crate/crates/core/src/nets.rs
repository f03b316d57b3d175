//! Segmentation network `G` and fully-convolutional discriminator `D`.
//!
//! `G` is a small encoder–decoder: three stride-2 3×3 conv blocks
//! (16, 32, 64 channels), bilinear upsampling back to input resolution, a 3×3
//! conv to 32 channels, and a 1×1 classifier followed by a channel softmax.
//!
//! `D` is five 4×4 stride-2 convolutions with 64, 64, 128, 128 and 1 filters,
//! leaky ReLU (0.2) between them, bilinear upsampling back to the input size
//! and a sigmoid. Its output is a per-pixel confidence that the input map is
//! a ground-truth one-hot encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{net} expects {expected} input channels, got {got}")]
    Channels {
        net: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{net} input {height}x{width} invalid: {reason}")]
    Size {
        net: &'static str,
        height: usize,
        width: usize,
        reason: String,
    },
    #[error("parameter `{name}`: {reason}")]
    Params { name: String, reason: String },
}

pub type Result<T> = std::result::Result<T, NetError>;

pub const GENERATOR_SLOPE: f64 = 0.1;
pub const DISCRIMINATOR_SLOPE: f64 = 0.2;
pub const DISCRIMINATOR_FILTERS: [usize; 5] = [64, 64, 128, 128, 1];
/// Smallest spatial size that survives five stride-2 layers.
pub const DISCRIMINATOR_MIN_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

/// Layer descriptor: name, output channels, input channels, kernel, stride, padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub name: &'static str,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Named, ordered parameter tensors: `<layer>.weight`, `<layer>.bias` per conv.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layers: Vec<ConvSpec>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn init(layers: Vec<ConvSpec>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(layers.len() * 2);
        for layer in &layers {
            let fan_in = layer.c_in * layer.kernel * layer.kernel;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let shape = vec![layer.c_out, layer.c_in, layer.kernel, layer.kernel];
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            tensors.push(Tensor::new(shape, data).expect("consistent shape"));
            tensors.push(Tensor::zeros(vec![layer.c_out]));
        }
        ParamSet { layers, tensors }
    }

    fn zeroed(layers: Vec<ConvSpec>) -> Self {
        let tensors = layers
            .iter()
            .flat_map(|l| {
                [
                    Tensor::zeros(vec![l.c_out, l.c_in, l.kernel, l.kernel]),
                    Tensor::zeros(vec![l.c_out]),
                ]
            })
            .collect();
        ParamSet { layers, tensors }
    }

    pub fn layers(&self) -> &[ConvSpec] {
        &self.layers
    }

    pub fn names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Named tensors, in layer order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.names().into_iter().zip(&self.tensors).collect()
    }

    /// Replaces every tensor from a name lookup, checking shapes.
    fn load(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (name, slot) in self.names().into_iter().zip(self.tensors.iter_mut()) {
            let t = lookup(&name).ok_or_else(|| NetError::Params {
                name: name.clone(),
                reason: "missing".into(),
            })?;
            if t.shape() != slot.shape() {
                return Err(NetError::Params {
                    reason: format!("shape {:?}, network expects {:?}", t.shape(), slot.shape()),
                    name,
                });
            }
            *slot = t;
        }
        Ok(())
    }

    /// Adds every tensor to `graph`, trainable or frozen.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| graph.leaf(t.clone(), trainable)).collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps existing graph variables, one per tensor of the parameter set in
    /// its declared order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    fn conv(&self, layer: usize) -> (Var, Var) {
        (self.vars[2 * layer], self.vars[2 * layer + 1])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after `backward`; unpopulated entries come back as zeros.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                graph
                    .grad_tensor(v)
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
            })
            .collect()
    }
}

fn conv_layer(graph: &mut Graph, bound: &Bound, spec: &ConvSpec, index: usize, x: Var) -> Result<Var> {
    let (w, b) = bound.conv(index);
    Ok(graph.conv2d(x, w, b, spec.stride, spec.padding)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    num_classes: usize,
    params: ParamSet,
}

impl GeneratorParams {
    pub fn layer_specs(num_classes: usize) -> Vec<ConvSpec> {
        let conv = |name, c_out, c_in, kernel, stride, padding| ConvSpec {
            name,
            c_out,
            c_in,
            kernel,
            stride,
            padding,
        };
        vec![
            conv("enc1", 16, IMAGE_CHANNELS, 3, 2, 1),
            conv("enc2", 32, 16, 3, 2, 1),
            conv("enc3", 64, 32, 3, 2, 1),
            conv("dec", 32, 64, 3, 1, 1),
            conv("cls", num_classes, 32, 1, 1, 0),
        ]
    }

    /// He-initialized weights, zero biases; deterministic in `seed`.
    pub fn init(num_classes: usize, seed: u64) -> Self {
        assert!(num_classes >= 2, "need at least two classes");
        GeneratorParams {
            num_classes,
            params: ParamSet::init(Self::layer_specs(num_classes), seed),
        }
    }

    pub fn from_lookup(num_classes: usize, lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut params = ParamSet::zeroed(Self::layer_specs(num_classes));
        params.load(lookup)?;
        Ok(GeneratorParams { num_classes, params })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(graph, trainable)
    }
}

/// `[B, 3, H, W]` image → `[B, |C|, H, W]` per-pixel class distribution.
pub fn generator_forward(graph: &mut Graph, params: &GeneratorParams, bound: &Bound, image: Var) -> Result<Var> {
    let [_, channels, height, width] = graph.value(image).dims4("generator_forward")?;
    if channels != IMAGE_CHANNELS {
        return Err(NetError::Channels {
            net: "generator",
            expected: IMAGE_CHANNELS,
            got: channels,
        });
    }
    if height % 8 != 0 || width % 8 != 0 || height < 16 || width < 16 {
        return Err(NetError::Size {
            net: "generator",
            height,
            width,
            reason: "height and width must be multiples of 8 and at least 16".into(),
        });
    }
    let layers = params.params.layers();
    let mut x = image;
    for (i, spec) in layers.iter().enumerate().take(3) {
        x = conv_layer(graph, bound, spec, i, x)?;
        x = graph.leaky_relu(x, GENERATOR_SLOPE);
    }
    x = graph.bilinear_upsample(x, height, width)?;
    x = conv_layer(graph, bound, &layers[3], 3, x)?;
    x = graph.leaky_relu(x, GENERATOR_SLOPE);
    x = conv_layer(graph, bound, &layers[4], 4, x)?;
    Ok(graph.softmax_channels(x)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    num_classes: usize,
    params: ParamSet,
}

impl DiscriminatorParams {
    pub fn layer_specs(num_classes: usize) -> Vec<ConvSpec> {
        const NAMES: [&str; 5] = ["d1", "d2", "d3", "d4", "d5"];
        let mut c_in = num_classes;
        NAMES
            .iter()
            .zip(DISCRIMINATOR_FILTERS)
            .map(|(&name, c_out)| {
                let spec = ConvSpec {
                    name,
                    c_out,
                    c_in,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                };
                c_in = c_out;
                spec
            })
            .collect()
    }

    pub fn init(num_classes: usize, seed: u64) -> Self {
        DiscriminatorParams {
            num_classes,
            params: ParamSet::init(Self::layer_specs(num_classes), seed),
        }
    }

    pub fn zeros(num_classes: usize) -> Self {
        DiscriminatorParams {
            num_classes,
            params: ParamSet::zeroed(Self::layer_specs(num_classes)),
        }
    }

    pub fn from_lookup(num_classes: usize, lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut d = Self::zeros(num_classes);
        d.params.load(lookup)?;
        Ok(d)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(graph, trainable)
    }
}

/// `[B, |C|, H, W]` class map → `[B, 1, H, W]` confidence in `(0, 1)`.
pub fn discriminator_forward(
    graph: &mut Graph,
    params: &DiscriminatorParams,
    bound: &Bound,
    class_map: Var,
) -> Result<Var> {
    let [_, channels, height, width] = graph.value(class_map).dims4("discriminator_forward")?;
    if channels != params.num_classes {
        return Err(NetError::Channels {
            net: "discriminator",
            expected: params.num_classes,
            got: channels,
        });
    }
    if height < DISCRIMINATOR_MIN_SIZE || width < DISCRIMINATOR_MIN_SIZE {
        return Err(NetError::Size {
            net: "discriminator",
            height,
            width,
            reason: format!("minimum size is {DISCRIMINATOR_MIN_SIZE}x{DISCRIMINATOR_MIN_SIZE}"),
        });
    }
    let layers = params.params.layers();
    let mut x = class_map;
    for (i, spec) in layers.iter().enumerate() {
        x = conv_layer(graph, bound, spec, i, x)?;
        if i + 1 < layers.len() {
            x = graph.leaky_relu(x, DISCRIMINATOR_SLOPE);
        }
    }
    x = graph.bilinear_upsample(x, height, width)?;
    Ok(graph.sigmoid(x))
}
