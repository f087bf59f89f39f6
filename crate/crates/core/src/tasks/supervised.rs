//! Desk-scale image classification: a synthetic 10-class digit-glyph
//! dataset in the CIMD container and a small CNN trained on it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, softmax_xent, Adam, Grads, LayerSpec, Network};
use crate::nnsim::{fake_quantize, noisy_forward, oracle_forward, MappedNetwork, QuantNetwork};
use crate::rng::{Stage, Streams};

const CIMD_MAGIC: &[u8; 4] = b"CIMD";
const CIMD_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

/// 5x7 digit font, one row per byte, bit 4 is the leftmost column.
const FONT: [[u8; 7]; 10] = [
    [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
    [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
    [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
    [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
    [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
    [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
    [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
    [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
    [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub labels: Vec<u16>,
    /// Row-major pixels per item, channel-major within an item.
    pub pixels: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Item `i` scaled to [0, 1].
    pub fn input(&self, i: usize) -> Vec<f32> {
        self.pixels[i].iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn inputs(&self) -> Vec<Vec<f32>> {
        (0..self.len()).map(|i| self.input(i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let item = self.height * self.width * self.channels;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (2 + item));
        out.extend_from_slice(CIMD_MAGIC);
        for v in [CIMD_VERSION, self.len() as u32, self.height as u32, self.width as u32, self.channels as u32, self.n_classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (l, p) in self.labels.iter().zip(&self.pixels) {
            out.extend_from_slice(&l.to_le_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN || &buf[..4] != CIMD_MAGIC {
            return Err(Error::format("missing CIMD header"));
        }
        let word = |k: usize| u32::from_le_bytes(buf[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        if word(0) != CIMD_VERSION as usize {
            return Err(Error::format(format!("unsupported CIMD version {}", word(0))));
        }
        let (n, height, width, channels, n_classes) = (word(1), word(2), word(3), word(4), word(5));
        let item = height * width * channels;
        if item == 0 || n_classes == 0 {
            return Err(Error::format("empty image shape or class count"));
        }
        if buf.len() != HEADER_LEN + n * (2 + item) {
            return Err(Error::format(format!("expected {} bytes for {n} items, found {}", HEADER_LEN + n * (2 + item), buf.len())));
        }
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n);
        for rec in buf[HEADER_LEN..].chunks_exact(2 + item) {
            let l = u16::from_le_bytes([rec[0], rec[1]]);
            if l as usize >= n_classes {
                return Err(Error::format(format!("label {l} out of range for {n_classes} classes")));
            }
            labels.push(l);
            pixels.push(rec[2..].to_vec());
        }
        Ok(Self { height, width, channels, n_classes, labels, pixels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format { path: Some(path.to_path_buf()), reason },
            other => other,
        })
    }

    fn check_net(&self, input: [usize; 3], n_out: usize) -> Result<()> {
        if input != self.shape() || n_out != self.n_classes {
            return Err(Error::Shape {
                expected: format!("input {:?} with {} outputs", self.shape(), self.n_classes),
                got: format!("input {input:?} with {n_out} outputs"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedParams {
    pub n_train: usize,
    pub n_test: usize,
    /// Std of additive pixel noise, as a fraction of full scale.
    pub pixel_noise: f64,
    /// Probability that a stroke pixel is dropped.
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    /// Train through weights fake-quantized to this many bits.
    pub qat_bits: Option<u8>,
    /// Clamp every weight to `[-c, c]` after each update.
    pub weight_clip: Option<f32>,
}

impl Default for SupervisedParams {
    fn default() -> Self {
        Self {
            n_train: 8000,
            n_test: 1000,
            pixel_noise: 0.15,
            dropout: 0.1,
            epochs: 10,
            batch: 32,
            lr: 2e-3,
            qat_bits: Some(5),
            weight_clip: Some(0.9375),
        }
    }
}

impl SupervisedParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::param("epochs, batch and lr must be positive"));
        }
        if !(self.pixel_noise >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("pixel_noise must be >= 0 and dropout in [0, 1)"));
        }
        if self.qat_bits.is_some_and(|b| !(2..=16).contains(&b)) || self.weight_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::param("qat_bits must be in 2..=16 and weight_clip positive"));
        }
        Ok(())
    }

    /// Two conv blocks and two dense layers for 12x12 single-channel input.
    pub fn architecture() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv { out_c: 8, k: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv { out_c: 16, k: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense(32),
            LayerSpec::Relu,
            LayerSpec::Dense(10),
        ]
    }
}

pub const GLYPH_SIDE: usize = 12;

/// `n` glyph images; item `i` of split `split` draws from `(Dataset, split, i)`.
pub fn generate_dataset(n: usize, split: u64, params: &SupervisedParams, streams: &Streams) -> Result<Dataset> {
    params.validate()?;
    let noise = Normal::new(0.0, params.pixel_noise * 255.0).map_err(|e| Error::param(e.to_string()))?;
    let items: Vec<(u16, Vec<u8>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.stream(Stage::Dataset, &[split, i]);
            let label = rng.random_range(0..10u16);
            let ox = rng.random_range(0..=GLYPH_SIDE - 5);
            let oy = rng.random_range(0..=GLYPH_SIDE - 7);
            let ink = rng.random_range(150.0..255.0);
            let mut img = vec![0.0f64; GLYPH_SIDE * GLYPH_SIDE];
            for (r, bits) in FONT[label as usize].iter().enumerate() {
                for c in 0..5 {
                    if bits >> (4 - c) & 1 == 1 && rng.random::<f64>() >= params.dropout {
                        img[(oy + r) * GLYPH_SIDE + ox + c] = ink;
                    }
                }
            }
            let px = img.iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 255.0).round() as u8).collect();
            (label, px)
        })
        .collect();
    let (labels, pixels) = items.into_iter().unzip();
    Ok(Dataset { height: GLYPH_SIDE, width: GLYPH_SIDE, channels: 1, n_classes: 10, labels, pixels })
}

/// Minibatch Adam on softmax cross-entropy; the epoch shuffle draws from
/// `(Train, epoch)`. With `qat_bits` the returned weights lie on that grid.
pub fn train_classifier(data: &Dataset, params: &SupervisedParams, streams: &Streams) -> Result<Network> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let mut shadow = Network::init(data.shape(), &SupervisedParams::architecture(), &mut streams.stream(Stage::Train, &[u64::MAX]))?;
    data.check_net(shadow.input, shadow.output_len())?;
    if let Some(c) = params.weight_clip {
        shadow.clamp_weights(c);
    }
    let effective = |n: &Network| match params.qat_bits {
        Some(b) => fake_quantize(n, b),
        None => Ok(n.clone()),
    };
    let mut net = effective(&shadow)?;
    let inputs = data.inputs();
    let mut opt = Adam::new(&net, params.lr);
    let mut grads = Grads::zeros_like(&net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut streams.stream(Stage::Train, &[epoch as u64]));
        for chunk in order.chunks(params.batch) {
            grads.clear();
            for &i in chunk {
                let acts = net.forward_all(&inputs[i]);
                let (_, d) = softmax_xent(acts.last().unwrap(), data.labels[i] as usize);
                net.backward(&acts, &d, &mut grads);
            }
            opt.step(&mut shadow, &grads, 1.0 / chunk.len() as f32);
            if let Some(c) = params.weight_clip {
                shadow.clamp_weights(c);
            }
            net = effective(&shadow)?;
        }
    }
    Ok(net)
}

fn accuracy(data: &Dataset, n: usize, predict: impl Fn(usize) -> usize + Sync) -> f64 {
    let n = n.min(data.len());
    if n == 0 {
        return 0.0;
    }
    let correct = (0..n).into_par_iter().filter(|&i| predict(i) == data.labels[i] as usize).count();
    correct as f64 / n as f64
}

pub fn accuracy_float(net: &Network, data: &Dataset, n: usize) -> Result<f64> {
    data.check_net(net.input, net.output_len())?;
    Ok(accuracy(data, n, |i| argmax(&net.forward(&data.input(i)))))
}

pub fn accuracy_quantized(q: &QuantNetwork, data: &Dataset, n: usize) -> Result<f64> {
    let n_out = q.macs().last().map_or(0, |m| m.kind.cols());
    data.check_net(q.input, n_out)?;
    Ok(accuracy(data, n, |i| argmax(&oracle_forward(q, &data.input(i)))))
}

/// Top-1 accuracy of the noisy forward pass over the first `n` items;
/// item `i` draws its dynamic noise from `(Forward, i)`.
pub fn eval_supervised(net: &MappedNetwork, data: &Dataset, n: usize, streams: &Streams) -> Result<f64> {
    let n_out = net.quant.macs().last().map_or(0, |m| m.kind.cols());
    data.check_net(net.quant.input, n_out)?;
    Ok(accuracy(data, n, |i| argmax(&noisy_forward(net, &data.input(i), &mut streams.stream(Stage::Forward, &[i as u64])))))
}
