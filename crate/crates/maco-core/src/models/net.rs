//! Small convolutional classifier with hand-rolled reverse mode: im2col
//! convolutions, ReLU stages, global average pooling and a linear head.
//! Forward activations are addressable per stage, and gradients can be
//! pulled back to the input from any addressable layer.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::models::shapes::ShapesDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stages: Vec<ConvStageSpec>,
    pub classes: usize,
}

impl NetSpec {
    /// Default testbed classifier: three stride-2 stages.
    pub fn reference(height: usize, width: usize) -> Self {
        NetSpec {
            in_channels: 3,
            height,
            width,
            stages: vec![
                ConvStageSpec { out_channels: 16, kernel: 3, stride: 2 },
                ConvStageSpec { out_channels: 32, kernel: 3, stride: 2 },
                ConvStageSpec { out_channels: 64, kernel: 3, stride: 2 },
            ],
            classes: 10,
        }
    }

    /// Six-stage variant for depth-sensitive diagnostics.
    pub fn deep(height: usize, width: usize) -> Self {
        NetSpec {
            in_channels: 3,
            height,
            width,
            stages: vec![
                ConvStageSpec { out_channels: 16, kernel: 3, stride: 2 },
                ConvStageSpec { out_channels: 16, kernel: 3, stride: 1 },
                ConvStageSpec { out_channels: 32, kernel: 3, stride: 2 },
                ConvStageSpec { out_channels: 32, kernel: 3, stride: 1 },
                ConvStageSpec { out_channels: 64, kernel: 3, stride: 2 },
                ConvStageSpec { out_channels: 64, kernel: 3, stride: 1 },
            ],
            classes: 10,
        }
    }

    /// Architecturally distinct transfer models trained on the same data.
    pub fn transfer_variants(height: usize, width: usize) -> Vec<(String, NetSpec)> {
        vec![
            (
                "narrow3".to_string(),
                NetSpec {
                    in_channels: 3,
                    height,
                    width,
                    stages: vec![
                        ConvStageSpec { out_channels: 8, kernel: 3, stride: 2 },
                        ConvStageSpec { out_channels: 16, kernel: 3, stride: 2 },
                        ConvStageSpec { out_channels: 32, kernel: 3, stride: 2 },
                    ],
                    classes: 10,
                },
            ),
            (
                "wide5".to_string(),
                NetSpec {
                    in_channels: 3,
                    height,
                    width,
                    stages: vec![
                        ConvStageSpec { out_channels: 12, kernel: 5, stride: 2 },
                        ConvStageSpec { out_channels: 24, kernel: 5, stride: 2 },
                        ConvStageSpec { out_channels: 48, kernel: 3, stride: 2 },
                    ],
                    classes: 10,
                },
            ),
            (
                "deep4".to_string(),
                NetSpec {
                    in_channels: 3,
                    height,
                    width,
                    stages: vec![
                        ConvStageSpec { out_channels: 16, kernel: 3, stride: 2 },
                        ConvStageSpec { out_channels: 24, kernel: 3, stride: 1 },
                        ConvStageSpec { out_channels: 32, kernel: 3, stride: 2 },
                        ConvStageSpec { out_channels: 48, kernel: 3, stride: 2 },
                    ],
                    classes: 10,
                },
            ),
        ]
    }

    fn stage_output_size(&self, mut h: usize, mut w: usize) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let p = s.kernel / 2;
            h = (h + 2 * p - s.kernel) / s.stride + 1;
            w = (w + 2 * p - s.kernel) / s.stride + 1;
            sizes.push((h, w));
        }
        sizes
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    /// `[out_channels, in_channels·k·k]`
    weight: Array2<f64>,
    bias: Array1<f64>,
    in_channels: usize,
    kernel: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct LinearLayer {
    /// `[classes, features]`
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// Trained (or freshly initialized) convolutional classifier.
#[derive(Debug, Clone)]
pub struct ConvNet {
    pub spec: NetSpec,
    stages: Vec<ConvLayer>,
    head: LinearLayer,
}

/// Per-layer activations kept for the reverse pass.
pub struct ForwardCache {
    /// Input to each stage (index 0 is the image).
    inputs: Vec<Array3<f64>>,
    /// Pre-ReLU stage outputs.
    preacts: Vec<Array3<f64>>,
    pooled: Array1<f64>,
    logits: Array1<f64>,
}

fn im2col(input: &Array3<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    let (ic, h, w) = input.dim();
    let p = kernel / 2;
    let oh = (h + 2 * p - kernel) / stride + 1;
    let ow = (w + 2 * p - kernel) / stride + 1;
    let mut cols = Array2::zeros((oh * ow, ic * kernel * kernel));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ci in 0..ic {
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, (ci * kernel + ky) * kernel + kx]] =
                            input[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    grad_cols: &Array2<f64>,
    ic: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> Array3<f64> {
    let p = kernel / 2;
    let oh = (h + 2 * p - kernel) / stride + 1;
    let ow = (w + 2 * p - kernel) / stride + 1;
    let mut grad_in = Array3::zeros((ic, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ci in 0..ic {
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        grad_in[[ci, iy as usize, ix as usize]] +=
                            grad_cols[[row, (ci * kernel + ky) * kernel + kx]];
                    }
                }
            }
        }
    }
    grad_in
}

impl ConvLayer {
    fn forward(&self, input: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = input.dim();
        let p = self.kernel / 2;
        let oh = (h + 2 * p - self.kernel) / self.stride + 1;
        let ow = (w + 2 * p - self.kernel) / self.stride + 1;
        let cols = im2col(input, self.kernel, self.stride);
        let out_mat = cols.dot(&self.weight.t()); // [oh*ow, oc]
        let oc = self.weight.dim().0;
        let mut pre = Array3::zeros((oc, oh, ow));
        for o in 0..oc {
            let b = self.bias[o];
            for oy in 0..oh {
                for ox in 0..ow {
                    pre[[o, oy, ox]] = out_mat[[oy * ow + ox, o]] + b;
                }
            }
        }
        (pre, cols)
    }

    fn backward_input(&self, grad_pre: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
        let (oc, oh, ow) = grad_pre.dim();
        let mut gmat = Array2::zeros((oh * ow, oc));
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    gmat[[oy * ow + ox, o]] = grad_pre[[o, oy, ox]];
                }
            }
        }
        let grad_cols = gmat.dot(&self.weight); // [oh*ow, ic*k*k]
        col2im(&grad_cols, self.in_channels, in_h, in_w, self.kernel, self.stride)
    }

    fn grad_params(&self, grad_pre: &Array3<f64>, cols: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let (oc, oh, ow) = grad_pre.dim();
        let mut gmat = Array2::zeros((oh * ow, oc));
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    gmat[[oy * ow + ox, o]] = grad_pre[[o, oy, ox]];
                }
            }
        }
        let gw = gmat.t().dot(cols);
        let gb = gmat.sum_axis(Axis(0));
        (gw, gb)
    }
}

impl ConvNet {
    /// He-initialized network, fully deterministic in the seed.
    pub fn init(spec: NetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut ic = spec.in_channels;
        for s in &spec.stages {
            let fan_in = ic * s.kernel * s.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let weight =
                Array2::from_shape_fn((s.out_channels, fan_in), |_| gaussian(&mut rng) * std);
            stages.push(ConvLayer {
                weight,
                bias: Array1::zeros(s.out_channels),
                in_channels: ic,
                kernel: s.kernel,
                stride: s.stride,
            });
            ic = s.out_channels;
        }
        let feat = ic;
        let std = (1.0 / feat as f64).sqrt();
        let head = LinearLayer {
            weight: Array2::from_shape_fn((spec.classes, feat), |_| gaussian(&mut rng) * std),
            bias: Array1::zeros(spec.classes),
        };
        ConvNet { spec, stages, head }
    }

    pub fn feature_len(&self) -> usize {
        self.head.weight.dim().1
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn forward(&self, x: &Image) -> Result<ForwardCache> {
        let (c, h, w) = (self.spec.in_channels, self.spec.height, self.spec.width);
        if x.dim() != (c, h, w) {
            return Err(Error::invalid_input(format!(
                "input shape {:?} does not match model input {:?}",
                x.dim(),
                (c, h, w)
            )));
        }
        // Fixed stem centering; gradient passes through unchanged.
        let mut inputs = vec![x.mapv(|v| v - 0.5)];
        let mut preacts = Vec::with_capacity(self.stages.len());
        for layer in &self.stages {
            let (pre, _cols) = layer.forward(inputs.last().unwrap());
            let post = pre.mapv(|v| v.max(0.0));
            preacts.push(pre);
            inputs.push(post);
        }
        let last = inputs.last().unwrap();
        let (oc, oh, ow) = last.dim();
        let denom = (oh * ow) as f64;
        let pooled = Array1::from_shape_fn(oc, |o| {
            last.index_axis(Axis(0), o).sum() / denom
        });
        let logits = self.head.weight.dot(&pooled) + &self.head.bias;
        Ok(ForwardCache {
            inputs,
            preacts,
            pooled,
            logits,
        })
    }

    /// Addressable layer ids: `conv1..convN` (post-ReLU), `pool`, `logits`.
    pub fn layer_ids(&self) -> Vec<(String, usize)> {
        let mut ids: Vec<(String, usize)> = self
            .spec
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("conv{}", i + 1), s.out_channels))
            .collect();
        ids.push(("pool".to_string(), self.feature_len()));
        ids.push(("logits".to_string(), self.spec.classes));
        ids
    }

    pub fn activation(&self, cache: &ForwardCache, layer: &str) -> Result<ArrayD<f64>> {
        if layer == "logits" {
            return Ok(cache.logits.clone().into_dyn());
        }
        if layer == "pool" {
            return Ok(cache.pooled.clone().into_dyn());
        }
        if let Some(idx) = self.stage_index(layer) {
            return Ok(cache.inputs[idx + 1].clone().into_dyn());
        }
        Err(Error::invalid_target(format!(
            "unknown layer '{layer}'; known: {}",
            self.layer_ids().iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ")
        )))
    }

    fn stage_index(&self, layer: &str) -> Option<usize> {
        let idx: usize = layer.strip_prefix("conv")?.parse().ok()?;
        if idx >= 1 && idx <= self.stages.len() {
            Some(idx - 1)
        } else {
            None
        }
    }

    /// Pull a gradient at `layer` back to the input image.
    pub fn backward_to_input(
        &self,
        cache: &ForwardCache,
        layer: &str,
        grad_act: &ArrayD<f64>,
    ) -> Result<Image> {
        let (stage_after, mut grad_stage): (usize, Array3<f64>) = if layer == "logits" {
            let g = grad_act
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| Error::invalid_input("logits gradient must be 1-D"))?;
            let gp = self.head.weight.t().dot(&g);
            (self.stages.len(), self.pool_backward(cache, &gp))
        } else if layer == "pool" {
            let g = grad_act
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| Error::invalid_input("pool gradient must be 1-D"))?
                .to_owned();
            (self.stages.len(), self.pool_backward(cache, &g))
        } else if let Some(idx) = self.stage_index(layer) {
            let g = grad_act
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|_| Error::invalid_input("stage gradient must be [C, h, w]"))?
                .to_owned();
            (idx + 1, g)
        } else {
            return Err(Error::invalid_target(format!("unknown layer '{layer}'")));
        };

        // grad_stage holds d L / d post-ReLU output of stage `stage_after - 1`.
        for si in (0..stage_after).rev() {
            let pre = &cache.preacts[si];
            let relu_masked = ndarray::Zip::from(&grad_stage)
                .and(pre)
                .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });
            let (_, in_h, in_w) = cache.inputs[si].dim();
            grad_stage = self.stages[si].backward_input(&relu_masked, in_h, in_w);
        }
        Ok(grad_stage)
    }

    fn pool_backward(&self, cache: &ForwardCache, grad_pooled: &Array1<f64>) -> Array3<f64> {
        let last = cache.inputs.last().unwrap();
        let (oc, oh, ow) = last.dim();
        let denom = (oh * ow) as f64;
        Array3::from_shape_fn((oc, oh, ow), |(o, _, _)| grad_pooled[o] / denom)
    }

    /// Forward plus parameter gradients for one labeled sample under
    /// softmax cross-entropy. Returns (loss, correct, gradients).
    fn loss_and_param_grads(&self, x: &Image, label: usize) -> Result<(f64, bool, GradBuf)> {
        // Forward, keeping im2col matrices for the weight gradients.
        let mut inputs = vec![x.mapv(|v| v - 0.5)];
        let mut preacts = Vec::with_capacity(self.stages.len());
        let mut cols_cache = Vec::with_capacity(self.stages.len());
        for layer in &self.stages {
            let (pre, cols) = layer.forward(inputs.last().unwrap());
            let post = pre.mapv(|v| v.max(0.0));
            preacts.push(pre);
            cols_cache.push(cols);
            inputs.push(post);
        }
        let last = inputs.last().unwrap();
        let (oc, oh, ow) = last.dim();
        let denom = (oh * ow) as f64;
        let pooled = Array1::from_shape_fn(oc, |o| last.index_axis(Axis(0), o).sum() / denom);
        let logits = self.head.weight.dot(&pooled) + &self.head.bias;

        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = logits.mapv(|v| (v - max).exp());
        let z: f64 = exps.sum();
        let probs = exps / z;
        let loss = -(probs[label].max(1e-300)).ln();
        let pred = argmax(&logits);

        let mut grad_logits = probs;
        grad_logits[label] -= 1.0;

        let gw_head = outer(&grad_logits, &pooled);
        let gb_head = grad_logits.clone();
        let grad_pooled = self.head.weight.t().dot(&grad_logits);
        let mut grad_stage =
            Array3::from_shape_fn((oc, oh, ow), |(o, _, _)| grad_pooled[o] / denom);

        let mut conv_w = vec![Array2::zeros((0, 0)); self.stages.len()];
        let mut conv_b = vec![Array1::zeros(0); self.stages.len()];
        for si in (0..self.stages.len()).rev() {
            let relu_masked = ndarray::Zip::from(&grad_stage)
                .and(&preacts[si])
                .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });
            let (gw, gb) = self.stages[si].grad_params(&relu_masked, &cols_cache[si]);
            conv_w[si] = gw;
            conv_b[si] = gb;
            if si > 0 {
                let (_, in_h, in_w) = inputs[si].dim();
                grad_stage = self.stages[si].backward_input(&relu_masked, in_h, in_w);
            }
        }
        Ok((
            loss,
            pred == label,
            GradBuf {
                conv_w,
                conv_b,
                head_w: gw_head,
                head_b: gb_head,
            },
        ))
    }

    pub fn predict(&self, x: &Image) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.logits))
    }

    pub fn accuracy(&self, images: &[&Image], labels: &[usize]) -> f64 {
        if images.is_empty() {
            return 0.0;
        }
        let correct: usize = images
            .par_iter()
            .zip(labels.par_iter())
            .map(|(x, &l)| usize::from(self.predict(x).map(|p| p == l).unwrap_or(false)))
            .sum();
        correct as f64 / images.len() as f64
    }
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, m) = (a.len(), b.len());
    Array2::from_shape_fn((n, m), |(i, j)| a[i] * b[j])
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct GradBuf {
    conv_w: Vec<Array2<f64>>,
    conv_b: Vec<Array1<f64>>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
}

impl GradBuf {
    fn zeros_like(net: &ConvNet) -> Self {
        GradBuf {
            conv_w: net.stages.iter().map(|l| Array2::zeros(l.weight.dim())).collect(),
            conv_b: net.stages.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            head_w: Array2::zeros(net.head.weight.dim()),
            head_b: Array1::zeros(net.head.bias.len()),
        }
    }

    fn add(&mut self, other: &GradBuf) {
        for (a, b) in self.conv_w.iter_mut().zip(other.conv_w.iter()) {
            *a += b;
        }
        for (a, b) in self.conv_b.iter_mut().zip(other.conv_b.iter()) {
            *a += b;
        }
        self.head_w += &other.head_w;
        self.head_b += &other.head_b;
    }

    fn scale(&mut self, s: f64) {
        for a in self.conv_w.iter_mut() {
            *a *= s;
        }
        for a in self.conv_b.iter_mut() {
            *a *= s;
        }
        self.head_w *= s;
        self.head_b *= s;
    }
}

/// Label-preserving training augmentation: flips and small integer shifts.
/// Every class is closed under mirroring because orientation is randomized
/// at rendering time.
fn augment(img: &Image, seed: u64, epoch: u64, index: u64) -> Image {
    let mixed = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch.wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
        .wrapping_add(index.wrapping_mul(0x1656_67b1_9e37_79f9));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let flip_h: bool = rng.gen();
    let flip_v: bool = rng.gen();
    let dy = rng.gen_range(-3i64..=3);
    let dx = rng.gen_range(-3i64..=3);
    let (c, h, w) = img.dim();
    Image::from_shape_fn((c, h, w), |(ch, y, x)| {
        let mut yy = y as i64;
        let mut xx = x as i64;
        if flip_h {
            xx = w as i64 - 1 - xx;
        }
        if flip_v {
            yy = h as i64 - 1 - yy;
        }
        yy = (yy + dy).clamp(0, h as i64 - 1);
        xx = (xx + dx).clamp(0, w as i64 - 1);
        img[[ch, yy as usize, xx as usize]]
    })
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_tensor<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    lr: f64,
    t: usize,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    ndarray::Zip::from(param)
        .and(m)
        .and(v)
        .and(g)
        .for_each(|p, m, v, &g| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        });
}

fn adam_step(net: &mut ConvNet, m: &mut GradBuf, v: &mut GradBuf, g: &GradBuf, lr: f64, t: usize) {
    for i in 0..net.stages.len() {
        adam_tensor(&mut net.stages[i].weight, &mut m.conv_w[i], &mut v.conv_w[i], &g.conv_w[i], lr, t);
        adam_tensor(&mut net.stages[i].bias, &mut m.conv_b[i], &mut v.conv_b[i], &g.conv_b[i], lr, t);
    }
    adam_tensor(&mut net.head.weight, &mut m.head_w, &mut v.head_w, &g.head_w, lr, t);
    adam_tensor(&mut net.head.bias, &mut m.head_b, &mut v.head_b, &g.head_b, lr, t);
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Print per-epoch training diagnostics to stderr.
    pub verbose: bool,
}

impl TrainConfig {
    pub fn new(seed: u64, epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: 5e-3,
            weight_decay: 5e-4,
            seed,
            verbose: false,
        }
    }
}

/// A trained classifier together with its held-out accuracy.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: ConvNet,
    pub holdout_accuracy: f64,
}

/// Train `spec` on the dataset with Adam over mini-batches; 20% of the data
/// is held out for the accuracy gate. Fully deterministic in the config
/// seed. Training to zero epochs skips the 0.80 accuracy floor and returns
/// the initialized network.
pub fn train(spec: NetSpec, dataset: &ShapesDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    if dataset.size != spec.height || spec.width != dataset.size {
        return Err(Error::invalid_input(format!(
            "dataset size {} does not match model input {}×{}",
            dataset.size, spec.height, spec.width
        )));
    }
    let mut net = ConvNet::init(spec, cfg.seed);
    let train_idx = dataset.train_indices();
    let holdout_idx = dataset.holdout_indices();
    let mut order: Vec<usize> = train_idx.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261_6e64));
    let mut m = GradBuf::zeros_like(&net);
    let mut v = GradBuf::zeros_like(&net);
    let mut step_count = 0usize;

    for epoch in 0..cfg.epochs {
        // Seeded Fisher–Yates shuffle per epoch.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let lr = if epoch + 1 > cfg.epochs * 4 / 5 {
            cfg.learning_rate * 0.2
        } else {
            cfg.learning_rate
        };

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, bool, GradBuf)> = batch
                .par_iter()
                .map(|&i| {
                    let img = augment(&dataset.images[i], cfg.seed, epoch as u64, i as u64);
                    net.loss_and_param_grads(&img, dataset.labels[i])
                })
                .collect::<Result<Vec<_>>>()?;
            let grads: Vec<GradBuf> = results
                .into_iter()
                .map(|(l, c, g)| {
                    epoch_loss += l;
                    epoch_correct += usize::from(c);
                    g
                })
                .collect();
            let mut total = GradBuf::zeros_like(&net);
            for g in &grads {
                total.add(g);
            }
            total.scale(1.0 / batch.len() as f64);
            step_count += 1;
            adam_step(&mut net, &mut m, &mut v, &total, lr, step_count);
            if cfg.weight_decay > 0.0 {
                let shrink = 1.0 - lr * cfg.weight_decay;
                for layer in net.stages.iter_mut() {
                    layer.weight *= shrink;
                }
                net.head.weight *= shrink;
            }
        }
        if cfg.verbose {
            eprintln!(
                "epoch {epoch}: loss {:.4} train-acc {:.3}",
                epoch_loss / order.len() as f64,
                epoch_correct as f64 / order.len() as f64
            );
        }
    }

    let ho_images: Vec<&Image> = holdout_idx.iter().map(|&i| &dataset.images[i]).collect();
    let ho_labels: Vec<usize> = holdout_idx.iter().map(|&i| dataset.labels[i]).collect();
    let holdout_accuracy = net.accuracy(&ho_images, &ho_labels);
    if cfg.epochs > 0 && holdout_accuracy < 0.80 {
        return Err(Error::TrainingFailure(format!(
            "held-out accuracy {holdout_accuracy:.3} below the 0.80 floor after {} epochs",
            cfg.epochs
        )));
    }
    Ok(TrainedModel {
        net,
        holdout_accuracy,
    })
}

/// Weight access for serialization.
impl ConvNet {
    pub(crate) fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut spec_enc = vec![
            self.spec.in_channels as f64,
            self.spec.height as f64,
            self.spec.width as f64,
            self.spec.classes as f64,
            self.spec.stages.len() as f64,
        ];
        for s in &self.spec.stages {
            spec_enc.extend([s.out_channels as f64, s.kernel as f64, s.stride as f64]);
        }
        let mut out = vec![("spec".to_string(), vec![spec_enc.len()], spec_enc)];
        for (i, l) in self.stages.iter().enumerate() {
            let (oc, f) = l.weight.dim();
            out.push((
                format!("conv{}.weight", i + 1),
                vec![oc, f],
                l.weight.iter().cloned().collect(),
            ));
            out.push((
                format!("conv{}.bias", i + 1),
                vec![l.bias.len()],
                l.bias.to_vec(),
            ));
        }
        let (k, f) = self.head.weight.dim();
        out.push((
            "head.weight".to_string(),
            vec![k, f],
            self.head.weight.iter().cloned().collect(),
        ));
        out.push(("head.bias".to_string(), vec![k], self.head.bias.to_vec()));
        out
    }

    pub(crate) fn from_named_tensors(
        tensors: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<ConvNet> {
        let find = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>)> {
            tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::format(0, format!("missing tensor '{name}'")))
        };
        let spec_t = find("spec")?;
        let enc = &spec_t.2;
        if enc.len() < 5 {
            return Err(Error::format(0, "spec tensor too short"));
        }
        let n_stages = enc[4] as usize;
        if enc.len() != 5 + 3 * n_stages {
            return Err(Error::format(0, "spec tensor length mismatch"));
        }
        let stages: Vec<ConvStageSpec> = (0..n_stages)
            .map(|i| ConvStageSpec {
                out_channels: enc[5 + 3 * i] as usize,
                kernel: enc[6 + 3 * i] as usize,
                stride: enc[7 + 3 * i] as usize,
            })
            .collect();
        let spec = NetSpec {
            in_channels: enc[0] as usize,
            height: enc[1] as usize,
            width: enc[2] as usize,
            classes: enc[3] as usize,
            stages,
        };
        let mut net = ConvNet::init(spec.clone(), 0);
        let mut ic = spec.in_channels;
        for (i, s) in spec.stages.iter().enumerate() {
            let wt = find(&format!("conv{}.weight", i + 1))?;
            let bt = find(&format!("conv{}.bias", i + 1))?;
            let fan = ic * s.kernel * s.kernel;
            if wt.1 != vec![s.out_channels, fan] {
                return Err(Error::format(0, format!("conv{} weight shape mismatch", i + 1)));
            }
            net.stages[i].weight =
                Array2::from_shape_vec((s.out_channels, fan), wt.2.clone()).unwrap();
            net.stages[i].bias = Array1::from_vec(bt.2.clone());
            ic = s.out_channels;
        }
        let wt = find("head.weight")?;
        let bt = find("head.bias")?;
        net.head.weight =
            Array2::from_shape_vec((spec.classes, ic), wt.2.clone())
                .map_err(|_| Error::format(0, "head weight shape mismatch"))?;
        net.head.bias = Array1::from_vec(bt.2.clone());
        Ok(net)
    }
}

pub(crate) fn activation_shape_of(spec: &NetSpec, layer: &str) -> Option<Vec<usize>> {
    if layer == "logits" {
        return Some(vec![spec.classes]);
    }
    let last = spec.stages.last()?;
    if layer == "pool" {
        return Some(vec![last.out_channels]);
    }
    let idx: usize = layer.strip_prefix("conv")?.parse().ok()?;
    if idx < 1 || idx > spec.stages.len() {
        return None;
    }
    let sizes = spec.stage_output_size(spec.height, spec.width);
    let (h, w) = sizes[idx - 1];
    Some(vec![spec.stages[idx - 1].out_channels, h, w])
}

pub(crate) fn dyn_to_image(a: ArrayD<f64>) -> Result<Array3<f64>> {
    a.into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::invalid_input("expected a [C, H, W] array"))
}

/// Temporary diagnostic: finite-difference check of parameter gradients.
pub fn probe_param_gradients() {
    use crate::models::shapes::generate_shapes_dataset;
    let ds = generate_shapes_dataset(10, 1, 16).unwrap();
    let spec = NetSpec {
        in_channels: 3,
        height: 16,
        width: 16,
        stages: vec![
            ConvStageSpec { out_channels: 4, kernel: 3, stride: 2 },
            ConvStageSpec { out_channels: 6, kernel: 3, stride: 2 },
            ConvStageSpec { out_channels: 8, kernel: 3, stride: 2 },
        ],
        classes: 10,
    };
    let net = ConvNet::init(spec, 3);
    let x = &ds.images[0];
    let label = ds.labels[0];
    let (_, _, g) = net.loss_and_param_grads(x, label).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (si, stage) in [(0usize, true), (1, true), (2, true)] {
        let _ = stage;
        for idx in [(0usize, 0usize), (1, 5), (3, 20)] {
            let mut net2 = net.clone();
            let orig = net2.stages[si].weight[[idx.0, idx.1]];
            net2.stages[si].weight[[idx.0, idx.1]] = orig + eps;
            let (lu, _, _) = net2.loss_and_param_grads(x, label).unwrap();
            net2.stages[si].weight[[idx.0, idx.1]] = orig - eps;
            let (ld, _, _) = net2.loss_and_param_grads(x, label).unwrap();
            let fd = (lu - ld) / (2.0 * eps);
            let an = g.conv_w[si][[idx.0, idx.1]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            worst = worst.max(rel);
            println!("conv{} w{:?}: fd {:.6e} analytic {:.6e} rel {:.2e}", si + 1, idx, fd, an, rel);
        }
    }
    // head + bias
    let mut net2 = net.clone();
    let orig = net2.head.weight[[2, 3]];
    net2.head.weight[[2, 3]] = orig + eps;
    let (lu, _, _) = net2.loss_and_param_grads(x, label).unwrap();
    net2.head.weight[[2, 3]] = orig - eps;
    let (ld, _, _) = net2.loss_and_param_grads(x, label).unwrap();
    let fd = (lu - ld) / (2.0 * eps);
    let an = g.head_w[[2, 3]];
    println!("head w(2,3): fd {:.6e} analytic {:.6e}", fd, an);
    println!("worst conv rel err: {worst:.3e}");
}
