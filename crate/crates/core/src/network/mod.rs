//! A small convolutional classifier with per-layer learning rates, freezing,
//! head replacement and embedding extraction.
//!
//! Training runs in `f32`; the same code instantiated at `f64` backs the
//! finite-difference gradient check.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod schedule;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use image::RgbImage;
use num_traits::Float;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use kernels::ConvGeom;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use schedule::LearningSchedule;

pub trait Real: Float + Send + Sync + fmt::Debug + 'static {}
impl Real for f32 {}
impl Real for f64 {}

/// Samples per gradient-reduction chunk; fixed so sums do not depend on
/// the thread count.
const REDUCE_CHUNK: usize = 4;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Relu,
    FullyConnected {
        units: usize,
    },
    /// Only allowed last; [`Network::forward`] returns the logits feeding it.
    Softmax,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::FullyConnected { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default = "one")]
    pub lr_multiplier: f64,
    #[serde(default)]
    pub frozen: bool,
}

fn one() -> f64 {
    1.0
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            lr_multiplier: 1.0,
            frozen: false,
        }
    }

    pub fn conv(name: &str, filters: usize, kernel: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv {
                filters,
                kernel,
                stride: 1,
                pad: 0,
            },
        )
    }

    pub fn pool(name: &str, size: usize) -> Self {
        Self::new(name, LayerKind::MaxPool { size, stride: size })
    }

    pub fn relu(name: &str) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn fc(name: &str, units: usize) -> Self {
        Self::new(name, LayerKind::FullyConnected { units })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    /// Conv: `[out][in][k][k]`; fully connected: `[in][out]`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Layer<T> {
    /// Parameterized, not frozen and with a nonzero rate multiplier.
    pub fn is_trainable(&self) -> bool {
        self.spec.kind.has_params() && !self.spec.frozen && self.spec.lr_multiplier > 0.0
    }

    pub fn fan_in(&self) -> usize {
        match self.spec.kind {
            LayerKind::Conv { kernel, .. } => self.input.c * kernel * kernel,
            LayerKind::FullyConnected { .. } => self.input.len(),
            _ => 0,
        }
    }

    fn conv_geom(&self) -> ConvGeom {
        match self.spec.kind {
            LayerKind::Conv {
                kernel,
                stride,
                pad,
                ..
            } => ConvGeom {
                input: self.input,
                output: self.output,
                kernel,
                stride,
                pad,
            },
            _ => unreachable!("not a conv layer"),
        }
    }

    fn init<R: Rng + ?Sized>(&mut self, bound: f64, rng: &mut R) {
        for w in &mut self.weights {
            *w = T::from(rng.random_range(-bound..=bound)).unwrap();
        }
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }
}

/// Sizes for the default conv-conv-fc6-fc7-head stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_size: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub fc_units: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            conv1_filters: 8,
            conv2_filters: 16,
            kernel: 5,
            fc_units: 64,
        }
    }
}

pub const CONV_LAYERS: [&str; 2] = ["conv1", "conv2"];
pub const HEAD: &str = "head";

impl ArchConfig {
    pub fn layer_specs(&self, num_classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv("conv1", self.conv1_filters, self.kernel),
            LayerSpec::relu("relu1"),
            LayerSpec::pool("pool1", 2),
            LayerSpec::conv("conv2", self.conv2_filters, self.kernel),
            LayerSpec::relu("relu2"),
            LayerSpec::pool("pool2", 2),
            LayerSpec::fc("fc6", self.fc_units),
            LayerSpec::relu("relu6"),
            LayerSpec::fc("fc7", self.fc_units),
            LayerSpec::relu("relu7"),
            LayerSpec::fc(HEAD, num_classes),
        ]
    }

    pub fn build<T: Real, R: Rng + ?Sized>(
        &self,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Network<T>> {
        Network::new(
            Shape::new(3, self.input_size, self.input_size),
            self.layer_specs(num_classes),
            rng,
        )
    }
}

/// A batch of CHW samples stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || data.len() % shape.len() != 0 {
            return Err(Error::Dimension(format!(
                "batch data of length {} is not a multiple of {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Images scaled to `[0, 1]` and centered by subtracting 0.5.
    pub fn from_images<'a, I: IntoIterator<Item = &'a RgbImage>>(images: I) -> Result<Self> {
        let mut data = Vec::new();
        let mut shape = None;
        for img in images {
            let s = Shape::new(3, img.height() as usize, img.width() as usize);
            if *shape.get_or_insert(s) != s {
                return Err(Error::Dimension(
                    "images in a batch must share dimensions".into(),
                ));
            }
            data.extend(
                crate::raster::to_chw(img)
                    .into_iter()
                    .map(|v| T::from(v - 0.5).unwrap()),
            );
        }
        let shape = shape.ok_or_else(|| Error::invalid("empty batch"))?;
        Self::new(shape, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        &self.data[i * self.shape.len()..][..self.shape.len()]
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from(*v).unwrap()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SampleCache<T> {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    pub acts: Vec<Vec<T>>,
    pub argmax: Vec<Vec<u32>>,
}

/// Activations retained by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    generation: u64,
    samples: Vec<SampleCache<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// ReLU on/off pattern and pooling winners; equal signatures mean the
    /// same linear region.
    pub fn kink_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for s in &self.samples {
            for a in &s.acts {
                sig.extend(a.iter().map(|v| u32::from(*v > T::zero())));
            }
            for am in &s.argmax {
                sig.extend_from_slice(am);
            }
        }
        sig
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Row-major `(batch, num_classes)`.
    pub logits: Vec<T>,
    pub num_classes: usize,
    pub cache: ForwardCache<T>,
}

impl<T> ForwardOutput<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.logits[i * self.num_classes..][..self.num_classes]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Per-layer parameter gradients; `None` for frozen and parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<ParamGrad<T>>>,
    names: Vec<String>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&ParamGrad<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        self.layers[i].as_ref()
    }

    pub fn produced(&self) -> Vec<&str> {
        self.names
            .iter()
            .zip(&self.layers)
            .filter(|(_, g)| g.is_some())
            .map(|(n, _)| n.as_str())
            .collect()
    }

    fn add(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                    *x = *x + *y;
                }
                for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                    *x = *x + *y;
                }
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.weights.iter().chain(&g.bias))
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input: Shape,
    layers: Vec<Layer<T>>,
    generation: u64,
}

fn output_shape(kind: &LayerKind, input: Shape, name: &str) -> Result<Shape> {
    let bad = |msg: String| Error::Config(format!("layer {name}: {msg}"));
    Ok(match *kind {
        LayerKind::Conv {
            filters,
            kernel,
            stride,
            pad,
        } => {
            if filters == 0 || kernel == 0 || stride == 0 {
                return Err(bad("filters, kernel and stride must be positive".into()));
            }
            let (hp, wp) = (input.h + 2 * pad, input.w + 2 * pad);
            if hp < kernel || wp < kernel {
                return Err(bad(format!("kernel {kernel} larger than input {input}")));
            }
            Shape::new(
                filters,
                (hp - kernel) / stride + 1,
                (wp - kernel) / stride + 1,
            )
        }
        LayerKind::MaxPool { size, stride } => {
            if size == 0 || stride == 0 {
                return Err(bad("pool size and stride must be positive".into()));
            }
            if input.h < size || input.w < size {
                return Err(bad(format!("pool window {size} larger than input {input}")));
            }
            Shape::new(
                input.c,
                (input.h - size) / stride + 1,
                (input.w - size) / stride + 1,
            )
        }
        LayerKind::Relu | LayerKind::Softmax => input,
        LayerKind::FullyConnected { units } => {
            if units == 0 {
                return Err(bad("unit count must be positive".into()));
            }
            Shape::new(units, 1, 1)
        }
    })
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

fn head_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

impl<T: Real> Network<T> {
    /// Build and initialize: He-uniform body weights, head weights uniform
    /// in `±1/sqrt(fan_in)`, zero biases.
    pub fn new<R: Rng + ?Sized>(input: Shape, specs: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut net = Self::shaped(input, specs)?;
        let head = net.head_index();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            if layer.spec.kind.has_params() {
                let fan_in = layer.fan_in();
                let bound = if i == head {
                    head_bound(fan_in)
                } else {
                    he_bound(fan_in)
                };
                layer.init(bound, rng);
            }
        }
        Ok(net)
    }

    /// Validated layer stack with zero parameters.
    pub fn shaped(input: Shape, specs: Vec<LayerSpec>) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Config("input shape must be non-empty".into()));
        }
        let mut names = BTreeSet::new();
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        let n = specs.len();
        for (i, spec) in specs.into_iter().enumerate() {
            if spec.name.is_empty() || spec.name.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid layer name {:?}", spec.name)));
            }
            if !names.insert(spec.name.clone()) {
                return Err(Error::Config(format!("duplicate layer name {}", spec.name)));
            }
            if matches!(spec.kind, LayerKind::Softmax) && i + 1 != n {
                return Err(Error::Config(
                    "softmax is only allowed as the final layer".into(),
                ));
            }
            if !(spec.lr_multiplier >= 0.0 && spec.lr_multiplier.is_finite()) {
                return Err(Error::Config(format!(
                    "layer {}: lr_multiplier must be >= 0",
                    spec.name
                )));
            }
            let out = output_shape(&spec.kind, shape, &spec.name)?;
            let (nw, nb) = match spec.kind {
                LayerKind::Conv {
                    filters, kernel, ..
                } => (filters * shape.c * kernel * kernel, filters),
                LayerKind::FullyConnected { units } => (shape.len() * units, units),
                _ => (0, 0),
            };
            layers.push(Layer {
                spec,
                input: shape,
                output: out,
                weights: vec![T::zero(); nw],
                bias: vec![T::zero(); nb],
            });
            shape = out;
        }
        let net = Self {
            input,
            layers,
            generation: next_generation(),
        };
        let head = net
            .layers
            .iter()
            .rposition(|l| l.spec.kind.has_params())
            .ok_or_else(|| Error::Config("network has no parameterized layer".into()))?;
        if !matches!(net.layers[head].spec.kind, LayerKind::FullyConnected { .. }) {
            return Err(Error::Config(
                "the last parameterized layer must be fully connected".into(),
            ));
        }
        if net.layers[head + 1..]
            .iter()
            .any(|l| !matches!(l.spec.kind, LayerKind::Softmax))
        {
            return Err(Error::Config("only a softmax may follow the head".into()));
        }
        Ok(net)
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.spec.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.spec.name == name)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.spec.name.as_str()).collect()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn head_index(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| l.spec.kind.has_params())
            .expect("validated at construction")
    }

    pub fn head(&self) -> &Layer<T> {
        &self.layers[self.head_index()]
    }

    pub fn num_classes(&self) -> usize {
        self.head().output.c
    }

    pub fn embedding_dim(&self) -> usize {
        self.head().input.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Changes whenever parameters change; caches from older generations
    /// are rejected by [`Network::backward`].
    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn touch(&mut self) {
        self.generation = next_generation();
    }

    /// Text description of the layer structure (no parameters, rates or
    /// freeze flags).
    pub fn architecture(&self) -> String {
        let mut s = format!("input {}\n", self.input);
        for l in &self.layers {
            let line = match l.spec.kind {
                LayerKind::Conv {
                    filters,
                    kernel,
                    stride,
                    pad,
                } => {
                    format!(
                        "conv {} filters={filters} kernel={kernel} stride={stride} pad={pad}",
                        l.spec.name
                    )
                }
                LayerKind::MaxPool { size, stride } => {
                    format!("maxpool {} size={size} stride={stride}", l.spec.name)
                }
                LayerKind::Relu => format!("relu {}", l.spec.name),
                LayerKind::FullyConnected { units } => format!("fc {} units={units}", l.spec.name),
                LayerKind::Softmax => format!("softmax {}", l.spec.name),
            };
            s.push_str(&line);
            s.push('\n');
        }
        s
    }

    /// FNV-1a over the bit patterns of the named layers' parameters.
    pub fn checksum(&self, names: &[&str]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in self
            .layers
            .iter()
            .filter(|l| names.contains(&l.spec.name.as_str()))
        {
            for v in l.weights.iter().chain(&l.bias) {
                for b in v.to_f64().unwrap().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    /// Checksum of every layer except the head.
    pub fn body_checksum(&self) -> u64 {
        let head = self.head().spec.name.clone();
        let names: Vec<&str> = self
            .layer_names()
            .into_iter()
            .filter(|n| *n != head)
            .collect();
        self.checksum(&names)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            input: self.input,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    input: l.input,
                    output: l.output,
                    weights: l.weights.iter().map(|v| U::from(*v).unwrap()).collect(),
                    bias: l.bias.iter().map(|v| U::from(*v).unwrap()).collect(),
                })
                .collect(),
            generation: next_generation(),
        }
    }

    /// Mutable parameter access for tests and tools; invalidates caches.
    pub fn params_mut(&mut self, name: &str) -> Result<(&mut Vec<T>, &mut Vec<T>)> {
        let i = self
            .layer_index(name)
            .ok_or_else(|| Error::invalid(format!("unknown layer {name}")))?;
        self.touch();
        let l = &mut self.layers[i];
        Ok((&mut l.weights, &mut l.bias))
    }

    pub fn set_lr_multiplier(&mut self, name: &str, mult: f64) -> Result<()> {
        if !(mult >= 0.0 && mult.is_finite()) {
            return Err(Error::invalid(format!("lr multiplier {mult} must be >= 0")));
        }
        let i = self
            .layer_index(name)
            .ok_or_else(|| Error::invalid(format!("unknown layer {name}")))?;
        self.layers[i].spec.lr_multiplier = mult;
        Ok(())
    }

    /// Freeze exactly the named layers and unfreeze the rest.
    pub fn set_freeze<S: AsRef<str>>(&mut self, frozen: &[S]) -> Result<()> {
        for n in frozen {
            if self.layer_index(n.as_ref()).is_none() {
                return Err(Error::invalid(format!(
                    "unknown layer {} in freeze set",
                    n.as_ref()
                )));
            }
        }
        for l in &mut self.layers {
            l.spec.frozen = frozen.iter().any(|n| n.as_ref() == l.spec.name);
        }
        Ok(())
    }

    pub fn frozen_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.spec.frozen)
            .map(|l| l.spec.name.as_str())
            .collect()
    }

    /// Re-initialize the head with `new_num_classes` outputs; every other
    /// layer is left untouched.
    pub fn replace_head<R: Rng + ?Sized>(
        &mut self,
        new_num_classes: usize,
        rng: &mut R,
    ) -> Result<()> {
        if new_num_classes < 2 {
            return Err(Error::invalid(format!(
                "head needs >= 2 classes, got {new_num_classes}"
            )));
        }
        let hi = self.head_index();
        let head = &mut self.layers[hi];
        head.spec.kind = LayerKind::FullyConnected {
            units: new_num_classes,
        };
        head.output = Shape::new(new_num_classes, 1, 1);
        head.weights = vec![T::zero(); head.input.len() * new_num_classes];
        head.bias = vec![T::zero(); new_num_classes];
        let bound = head_bound(head.fan_in());
        head.init(bound, rng);
        for l in &mut self.layers[hi + 1..] {
            l.input = Shape::new(new_num_classes, 1, 1);
            l.output = l.input;
        }
        self.touch();
        Ok(())
    }

    fn forward_sample(&self, x: &[T], upto: usize) -> SampleCache<T> {
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(upto + 1);
        let mut argmax = Vec::new();
        acts.push(x.to_vec());
        for l in &self.layers[..upto] {
            let inp = acts.last().expect("input pushed");
            let mut out = vec![T::zero(); l.output.len()];
            match l.spec.kind {
                LayerKind::Conv { .. } => {
                    kernels::conv_forward(&l.conv_geom(), inp, &l.weights, &l.bias, &mut out)
                }
                LayerKind::MaxPool { size, stride } => {
                    let mut am = vec![0u32; out.len()];
                    kernels::pool_forward(l.input, l.output, size, stride, inp, &mut out, &mut am);
                    argmax.push(am);
                }
                LayerKind::Relu => {
                    for (o, &i) in out.iter_mut().zip(inp) {
                        *o = i.max(T::zero());
                    }
                }
                LayerKind::FullyConnected { .. } => {
                    kernels::fc_forward(inp, &l.weights, &l.bias, &mut out)
                }
                LayerKind::Softmax => unreachable!("forward stops before softmax"),
            }
            acts.push(out);
        }
        SampleCache { acts, argmax }
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        if batch.shape != self.input {
            return Err(Error::Dimension(format!(
                "batch samples are {}, network expects {}",
                batch.shape, self.input
            )));
        }
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        Ok(())
    }

    /// Logits for every sample plus the activations needed by `backward`.
    pub fn forward(&self, batch: &Batch<T>) -> Result<ForwardOutput<T>> {
        self.check_batch(batch)?;
        let upto = self.head_index() + 1;
        let samples: Vec<SampleCache<T>> = (0..batch.len())
            .into_par_iter()
            .map(|i| self.forward_sample(batch.sample(i), upto))
            .collect();
        let k = self.num_classes();
        let logits = samples
            .iter()
            .flat_map(|s| s.acts[upto].iter().copied())
            .collect();
        Ok(ForwardOutput {
            logits,
            num_classes: k,
            cache: ForwardCache {
                generation: self.generation,
                samples,
            },
        })
    }

    /// Logits without keeping a cache.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<T>> {
        Ok(self.forward(batch)?.logits)
    }

    /// Index of the largest logit per sample (lowest index on ties).
    pub fn classify(&self, batch: &Batch<T>) -> Result<Vec<u32>> {
        let out = self.forward(batch)?;
        Ok((0..batch.len())
            .map(|i| argmax(out.row(i)) as u32)
            .collect())
    }

    /// Flattened post-activation output of `layer_name` for one CHW image.
    /// A parameterized layer directly followed by a ReLU reports the ReLU
    /// output.
    pub fn extract_embedding(&self, image: &[T], layer_name: &str) -> Result<Vec<T>> {
        let idx = self.embedding_index(layer_name)?;
        if image.len() != self.input.len() {
            return Err(Error::Dimension(format!(
                "image has {} values, network expects {}",
                image.len(),
                self.input
            )));
        }
        let mut cache = self.forward_sample(image, idx + 1);
        Ok(cache.acts.pop().expect("at least one activation"))
    }

    pub fn extract_embeddings(&self, batch: &Batch<T>, layer_name: &str) -> Result<Vec<Vec<T>>> {
        self.check_batch(batch)?;
        let idx = self.embedding_index(layer_name)?;
        Ok((0..batch.len())
            .into_par_iter()
            .map(|i| {
                let mut c = self.forward_sample(batch.sample(i), idx + 1);
                c.acts.pop().expect("at least one activation")
            })
            .collect())
    }

    fn embedding_index(&self, layer_name: &str) -> Result<usize> {
        let idx = self
            .layer_index(layer_name)
            .ok_or_else(|| Error::invalid(format!("unknown layer {layer_name}")))?;
        if idx >= self.head_index() {
            return Err(Error::invalid(format!(
                "layer {layer_name} does not precede the head"
            )));
        }
        let next_is_relu = self
            .layers
            .get(idx + 1)
            .is_some_and(|l| matches!(l.spec.kind, LayerKind::Relu));
        Ok(
            if self.layers[idx].spec.kind.has_params()
                && next_is_relu
                && idx + 1 < self.head_index()
            {
                idx + 1
            } else {
                idx
            },
        )
    }

    fn empty_grads(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.is_trainable().then(|| ParamGrad {
                        weights: vec![T::zero(); l.weights.len()],
                        bias: vec![T::zero(); l.bias.len()],
                    })
                })
                .collect(),
            names: self.layers.iter().map(|l| l.spec.name.clone()).collect(),
        }
    }

    fn backward_sample(
        &self,
        cache: &SampleCache<T>,
        dlogits: &[T],
        lowest: usize,
        grads: &mut Gradients<T>,
    ) {
        let top = self.head_index();
        let mut d = dlogits.to_vec();
        let mut pool_slot = cache.argmax.len();
        for li in (lowest..=top).rev() {
            let l = &self.layers[li];
            let x = &cache.acts[li];
            let need_dx = li > lowest;
            let mut dx = if need_dx {
                vec![T::zero(); l.input.len()]
            } else {
                Vec::new()
            };
            let g = grads.layers[li]
                .as_mut()
                .map(|g| (&mut g.weights[..], &mut g.bias[..]));
            match l.spec.kind {
                LayerKind::Conv { .. } => {
                    kernels::conv_backward(
                        &l.conv_geom(),
                        x,
                        &l.weights,
                        &d,
                        g,
                        need_dx.then_some(&mut dx[..]),
                    );
                }
                LayerKind::FullyConnected { .. } => {
                    kernels::fc_backward(x, &l.weights, &d, g, need_dx.then_some(&mut dx[..]));
                }
                LayerKind::MaxPool { .. } => {
                    pool_slot -= 1;
                    if need_dx {
                        kernels::pool_backward(&cache.argmax[pool_slot], &d, &mut dx);
                    }
                }
                LayerKind::Relu => {
                    if need_dx {
                        for ((o, &dv), &xv) in dx.iter_mut().zip(&d).zip(x) {
                            *o = if xv > T::zero() { dv } else { T::zero() };
                        }
                    }
                }
                LayerKind::Softmax => unreachable!("backward starts at the head"),
            }
            if !need_dx {
                break;
            }
            d = dx;
        }
    }

    /// Parameter gradients for trainable layers, summed over the batch.
    /// Propagation stops at the lowest trainable layer.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Result<Gradients<T>> {
        if cache.generation != self.generation {
            return Err(Error::State(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let k = self.num_classes();
        if dlogits.len() != cache.samples.len() * k {
            return Err(Error::Dimension(format!(
                "dlogits has {} values, expected {} x {k}",
                dlogits.len(),
                cache.samples.len()
            )));
        }
        let mut total = self.empty_grads();
        let Some(lowest) = self.layers.iter().position(|l| l.is_trainable()) else {
            return Ok(total);
        };
        let partials: Vec<Gradients<T>> = cache
            .samples
            .par_chunks(REDUCE_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut g = self.empty_grads();
                for (j, s) in chunk.iter().enumerate() {
                    let i = ci * REDUCE_CHUNK + j;
                    self.backward_sample(s, &dlogits[i * k..][..k], lowest, &mut g);
                }
                g
            })
            .collect();
        for p in &partials {
            total.add(p);
        }
        Ok(total)
    }

    /// `param -= rate * grad` for every trainable layer with a gradient.
    pub fn sgd_step(
        &mut self,
        grads: &Gradients<T>,
        schedule: &LearningSchedule,
        iteration: u64,
    ) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Dimension(
                "gradients do not match the network".into(),
            ));
        }
        let head = self.head_index();
        // fails on an exhausted schedule before touching anything
        schedule.rate(false, 1.0, iteration)?;
        for (i, (l, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            let Some(g) = g else { continue };
            if !l.is_trainable() {
                continue;
            }
            if g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len() {
                return Err(Error::Dimension(format!(
                    "gradient shape mismatch at {}",
                    l.spec.name
                )));
            }
            let rate = T::from(schedule.rate(i == head, l.spec.lr_multiplier, iteration)?).unwrap();
            for (p, d) in l.weights.iter_mut().zip(&g.weights) {
                *p = *p - rate * *d;
            }
            for (p, d) in l.bias.iter_mut().zip(&g.bias) {
                *p = *p - rate * *d;
            }
        }
        self.touch();
        Ok(())
    }

    /// One forward/backward/update on a labeled batch; returns the mean loss.
    pub fn train_step(
        &mut self,
        batch: &Batch<T>,
        labels: &[u32],
        schedule: &LearningSchedule,
        iteration: u64,
    ) -> Result<T> {
        schedule.rate(false, 1.0, iteration)?;
        let out = self.forward(batch)?;
        let (loss, dlogits) = softmax_cross_entropy(&out.logits, out.num_classes, labels)?;
        let grads = self.backward(&out.cache, &dlogits)?;
        self.sgd_step(&grads, schedule, iteration)?;
        Ok(loss)
    }
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Real>(logits: &[T], num_classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(num_classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|v| (*v - m).exp()).collect();
        let s = e.iter().copied().fold(T::zero(), |a, b| a + b);
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Mean cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &[T],
    num_classes: usize,
    labels: &[u32],
) -> Result<(T, Vec<T>)> {
    if num_classes == 0 || logits.len() != labels.len() * num_classes || labels.is_empty() {
        return Err(Error::Dimension(format!(
            "{} logits for {} labels and {num_classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::invalid(format!(
            "label {l} outside [0, {num_classes})"
        )));
    }
    let n = T::from(labels.len()).unwrap();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks(num_classes).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let s = row.iter().fold(T::zero(), |a, v| a + (*v - m).exp());
        let log_z = m + s.ln();
        loss = loss + (log_z - row[y as usize]);
        for (j, v) in row.iter().enumerate() {
            let p = (*v - log_z).exp();
            let t = if j == y as usize { T::one() } else { T::zero() };
            grad.push((p - t) / n);
        }
    }
    Ok((loss / n, grad))
}
