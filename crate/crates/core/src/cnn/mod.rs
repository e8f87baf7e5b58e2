//! A compact tanh CNN for four-way gaze classification.
//!
//! Layer chain for the default 64x64x3 input:
//!
//! ```text
//! conv 3x3x16 -> 62x62x16 -> maxpool 4 -> 15x15x16
//! conv 3x3x12 -> 13x13x12 -> maxpool 13 -> 1x1x12
//! fc 16 -> fc 4
//! ```
//!
//! Convolutions are valid (no padding, stride 1), pooling is
//! non-overlapping with floor division, and every conv and dense layer is
//! followed by tanh. The last pooling factor always equals the spatial size
//! that survives the second convolution, so its output is 1x1 per filter.
//!
//! Since tanh is strictly increasing, `maxpool(tanh(z + b)) == tanh(maxpool(z) + b)`;
//! the fast path pools raw convolution sums and applies bias and tanh only
//! to the survivors. [`Network::forward_layers`] evaluates the textbook order
//! and is kept as a reference.

mod backprop;
mod conv;
mod train;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax_first, ClassifierKind, GazeClassifier, Prediction};
use crate::corpus::GazeClass;
use crate::error::{Error, Result};
use crate::frame::{EyeFrame, NormalizedImage};
use crate::preprocess::{decimate, normalize, SIGMA_FLOOR};

pub use backprop::{BatchStats, Gradients};
pub use train::{train, StopReason, TrainConfig, TrainHistory, TrainRecord};

/// Hyperparameters fixing every layer size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: usize,
    pub input_channels: usize,
    pub kernel: usize,
    pub conv1_filters: usize,
    pub pool1: usize,
    pub conv2_filters: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl Architecture {
    /// 64x64x3 input, 16 and 12 filters of 3x3, pool factor 4, 16 hidden, 4 outputs.
    pub const fn standard() -> Self {
        Architecture {
            input_size: 64,
            input_channels: 3,
            kernel: 3,
            conv1_filters: 16,
            pool1: 4,
            conv2_filters: 12,
            hidden: 16,
            outputs: 4,
        }
    }

    pub fn conv1_size(&self) -> usize {
        self.input_size + 1 - self.kernel
    }

    pub fn pool1_size(&self) -> usize {
        self.conv1_size() / self.pool1
    }

    pub fn conv2_size(&self) -> usize {
        self.pool1_size() + 1 - self.kernel
    }

    /// Adaptive factor: whatever reduces the second conv map to 1x1.
    pub fn pool2(&self) -> usize {
        self.conv2_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("architecture: {m}")));
        if self.kernel == 0
            || self.pool1 == 0
            || self.conv1_filters == 0
            || self.conv2_filters == 0
            || self.hidden == 0
            || self.outputs == 0
            || self.input_channels == 0
        {
            return bad("all sizes must be positive");
        }
        if self.input_size < self.kernel {
            return bad("input smaller than kernel");
        }
        if self.pool1_size() < self.kernel {
            return bad("first pooling leaves less than one kernel");
        }
        Ok(())
    }

    fn conv1_weights(&self) -> usize {
        self.conv1_filters * self.input_channels * self.kernel * self.kernel
    }

    fn conv2_weights(&self) -> usize {
        self.conv2_filters * self.conv1_filters * self.kernel * self.kernel
    }
}

/// Channel-major activation volume. `shape()` reports `(height, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub filters: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `[filter][channel][ky][kx]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `[output][input]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            (row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b).tanh()
        }));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub fc1: DenseLayer,
    pub fc_out: DenseLayer,
}

/// Intermediate activations from [`Network::forward_layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutputs {
    pub conv1: Tensor3,
    pub pool1: Tensor3,
    pub conv2: Tensor3,
    pub pool2: Tensor3,
    pub fc1: Vec<f64>,
    pub output: Vec<f64>,
}

/// What the backward pass needs from a forward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct ForwardCache {
    /// Winning conv1 position per pooled cell, as `y * pool_span + x`.
    pool1_arg: Vec<u32>,
    pool1: Vec<f64>,
    pool2_arg: Vec<u32>,
    pool2: Vec<f64>,
    hidden: Vec<f64>,
    pub(crate) output: Vec<f64>,
}

/// Scratch buffers reused across forward passes.
#[derive(Debug, Default)]
pub(crate) struct Workspace {
    conv1: Vec<f64>,
    conv2: Vec<f64>,
}

/// Non-overlapping max pooling of each `span`x`span` map by `factor`;
/// returns the winners and their flat positions. Ties keep the first
/// position in row-major order.
fn max_pool(maps: &[f64], filters: usize, span: usize, factor: usize, vals: &mut Vec<f64>, args: &mut Vec<u32>) {
    let pooled = span / factor;
    vals.clear();
    args.clear();
    for f in 0..filters {
        let map = &maps[f * span * span..(f + 1) * span * span];
        for py in 0..pooled {
            for px in 0..pooled {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for dy in 0..factor {
                    let row = (py * factor + dy) * span;
                    for dx in 0..factor {
                        let i = row + px * factor + dx;
                        if map[i] > best {
                            best = map[i];
                            arg = i;
                        }
                    }
                }
                vals.push(best);
                args.push(arg as u32);
            }
        }
    }
}

impl Network {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel;
        Ok(Network {
            arch,
            conv1: ConvLayer {
                filters: arch.conv1_filters,
                in_channels: arch.input_channels,
                kernel: k,
                weights: vec![0.0; arch.conv1_weights()],
                bias: vec![0.0; arch.conv1_filters],
            },
            conv2: ConvLayer {
                filters: arch.conv2_filters,
                in_channels: arch.conv1_filters,
                kernel: k,
                weights: vec![0.0; arch.conv2_weights()],
                bias: vec![0.0; arch.conv2_filters],
            },
            fc1: DenseLayer {
                inputs: arch.conv2_filters,
                outputs: arch.hidden,
                weights: vec![0.0; arch.conv2_filters * arch.hidden],
                bias: vec![0.0; arch.hidden],
            },
            fc_out: DenseLayer {
                inputs: arch.hidden,
                outputs: arch.outputs,
                weights: vec![0.0; arch.hidden * arch.outputs],
                bias: vec![0.0; arch.outputs],
            },
        })
    }

    /// Every weight and bias drawn uniformly from `[-scale, scale]`.
    pub fn random(arch: Architecture, seed: u64, scale: f64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params_mut() {
            for v in p.iter_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
        Ok(net)
    }

    pub fn params(&self) -> [&[f64]; 8] {
        [
            &self.conv1.weights,
            &self.conv1.bias,
            &self.conv2.weights,
            &self.conv2.bias,
            &self.fc1.weights,
            &self.fc1.bias,
            &self.fc_out.weights,
            &self.fc_out.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.conv1.weights,
            &mut self.conv1.bias,
            &mut self.conv2.weights,
            &mut self.conv2.bias,
            &mut self.fc1.weights,
            &mut self.fc1.bias,
            &mut self.fc_out.weights,
            &mut self.fc_out.bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, input: &NormalizedImage) -> Result<()> {
        let a = &self.arch;
        if input.shape() != (a.input_size, a.input_size, a.input_channels) {
            return Err(Error::SizeMismatch(format!(
                "network expects {}x{}x{} input, got {}x{}x{}",
                a.input_size, a.input_size, a.input_channels, input.width, input.height, input.channels
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, input: &[f64], ws: &mut Workspace, cache: &mut ForwardCache) {
        let a = &self.arch;
        let span1 = a.pool1_size() * a.pool1;
        conv::conv_sums(&self.conv1, input, a.input_size, a.input_size, span1, span1, &mut ws.conv1);
        max_pool(&ws.conv1, a.conv1_filters, span1, a.pool1, &mut cache.pool1, &mut cache.pool1_arg);
        let cells1 = a.pool1_size() * a.pool1_size();
        for (i, v) in cache.pool1.iter_mut().enumerate() {
            *v = (*v + self.conv1.bias[i / cells1]).tanh();
        }

        let p1 = a.pool1_size();
        let span2 = a.conv2_size();
        conv::conv_sums(&self.conv2, &cache.pool1, p1, p1, span2, span2, &mut ws.conv2);
        max_pool(&ws.conv2, a.conv2_filters, span2, a.pool2(), &mut cache.pool2, &mut cache.pool2_arg);
        for (f, v) in cache.pool2.iter_mut().enumerate() {
            *v = (*v + self.conv2.bias[f]).tanh();
        }

        self.fc1.forward(&cache.pool2, &mut cache.hidden);
        self.fc_out.forward(&cache.hidden, &mut cache.output);
    }

    /// Class scores in (-1, 1).
    pub fn forward(&self, input: &NormalizedImage) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut ws = Workspace::default();
        let mut cache = ForwardCache::default();
        self.forward_cached(&input.values, &mut ws, &mut cache);
        Ok(cache.output)
    }

    /// Reference evaluation in textbook order, exposing every activation.
    pub fn forward_layers(&self, input: &NormalizedImage) -> Result<LayerOutputs> {
        self.check_input(input)?;
        let a = &self.arch;
        let x = Tensor3 {
            channels: a.input_channels,
            height: a.input_size,
            width: a.input_size,
            data: input.values.clone(),
        };
        let conv1 = conv_direct(&self.conv1, &x);
        let pool1 = pool_direct(&conv1, a.pool1);
        let conv2 = conv_direct(&self.conv2, &pool1);
        let pool2 = pool_direct(&conv2, a.pool2());
        let mut fc1 = Vec::new();
        self.fc1.forward(&pool2.data, &mut fc1);
        let mut output = Vec::new();
        self.fc_out.forward(&fc1, &mut output);
        Ok(LayerOutputs {
            conv1,
            pool1,
            conv2,
            pool2,
            fc1,
            output,
        })
    }

    /// Decimate, normalize, forward, softmax; ties resolve to canonical order.
    pub fn predict(&self, frame: &EyeFrame) -> Result<(GazeClass, [f64; 4])> {
        if self.arch.outputs != 4 || self.arch.input_channels != 3 {
            return Err(Error::Classifier(
                "predict needs a 3-channel, 4-output network".into(),
            ));
        }
        let input = normalize(&decimate(frame, self.arch.input_size as u32));
        let scores = self.forward(&input)?;
        let probs = softmax(&scores);
        let probs: [f64; 4] = probs.try_into().expect("four outputs");
        Ok((GazeClass::ALL[argmax_first(&probs)], probs))
    }
}

fn conv_direct(layer: &ConvLayer, x: &Tensor3) -> Tensor3 {
    let k = layer.kernel;
    let oh = x.height + 1 - k;
    let ow = x.width + 1 - k;
    let mut out = Tensor3::zeros(layer.filters, oh, ow);
    for f in 0..layer.filters {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut z = layer.bias[f];
                for c in 0..layer.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = layer.weights[((f * layer.in_channels + c) * k + ky) * k + kx];
                            z += w * x.at(c, oy + ky, ox + kx);
                        }
                    }
                }
                out.data[(f * oh + oy) * ow + ox] = z.tanh();
            }
        }
    }
    out
}

fn pool_direct(x: &Tensor3, factor: usize) -> Tensor3 {
    let ph = x.height / factor;
    let pw = x.width / factor;
    let mut out = Tensor3::zeros(x.channels, ph, pw);
    for c in 0..x.channels {
        for py in 0..ph {
            for px in 0..pw {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..factor {
                    for dx in 0..factor {
                        m = m.max(x.at(c, py * factor + dy, px * factor + dx));
                    }
                }
                out.data[(c * ph + py) * pw + px] = m;
            }
        }
    }
    out
}

/// Max-shifted exponential normalization.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// +1 for the true class, -1 elsewhere.
pub fn target_vector(class: usize, outputs: usize) -> Vec<f64> {
    (0..outputs).map(|i| if i == class { 1.0 } else { -1.0 }).collect()
}

/// Plain sum of squared errors against the +/-1 target encoding.
pub fn loss(scores: &[f64], class: usize) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let t = if i == class { 1.0 } else { -1.0 };
            (y - t).powi(2)
        })
        .sum()
}

/// A preprocessed training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: NormalizedImage,
    pub class: usize,
}

impl Sample {
    pub fn from_frame(frame: &EyeFrame, class: GazeClass, arch: &Architecture) -> Self {
        Sample {
            input: normalize(&decimate(frame, arch.input_size as u32)),
            class: class.index(),
        }
    }
}

impl GazeClassifier for Network {
    fn classify(&self, frame: &EyeFrame) -> Result<Prediction> {
        let (class, probs) = self.predict(frame)?;
        Ok(Prediction { class, probs })
    }

    fn kind(&self) -> ClassifierKind {
        ClassifierKind::Cnn
    }
}

const MODEL_FORMAT: &str = "gazechair-cnn";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PreprocessingContract {
    input_size: usize,
    channels: usize,
    resample: String,
    normalization: String,
    sigma_floor: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    architecture: Architecture,
    preprocessing: PreprocessingContract,
    conv1: ConvLayer,
    conv2: ConvLayer,
    fc1: DenseLayer,
    fc_out: DenseLayer,
}

impl Network {
    fn contract(&self) -> PreprocessingContract {
        PreprocessingContract {
            input_size: self.arch.input_size,
            channels: self.arch.input_channels,
            resample: "area".into(),
            normalization: "per_image_zscore".into(),
            sigma_floor: SIGMA_FLOOR,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            architecture: self.arch,
            preprocessing: self.contract(),
            conv1: self.conv1.clone(),
            conv2: self.conv2.clone(),
            fc1: self.fc1.clone(),
            fc_out: self.fc_out.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!("unexpected format tag `{}`", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {}", file.version)));
        }
        let template = Network::zeros(file.architecture)?;
        if file.preprocessing != template.contract() {
            return Err(Error::ModelFormat("preprocessing contract mismatch".into()));
        }
        let net = Network {
            arch: file.architecture,
            conv1: file.conv1,
            conv2: file.conv2,
            fc1: file.fc1,
            fc_out: file.fc_out,
        };
        let layers_ok = net.conv1.filters == template.conv1.filters
            && net.conv1.in_channels == template.conv1.in_channels
            && net.conv1.kernel == template.conv1.kernel
            && net.conv2.filters == template.conv2.filters
            && net.conv2.in_channels == template.conv2.in_channels
            && net.conv2.kernel == template.conv2.kernel
            && (net.fc1.inputs, net.fc1.outputs) == (template.fc1.inputs, template.fc1.outputs)
            && (net.fc_out.inputs, net.fc_out.outputs)
                == (template.fc_out.inputs, template.fc_out.outputs);
        let lengths_ok = net
            .params()
            .iter()
            .zip(template.params())
            .all(|(a, b)| a.len() == b.len());
        if !layers_ok || !lengths_ok {
            return Err(Error::ModelFormat(
                "layer shapes do not match the declared architecture".into(),
            ));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
