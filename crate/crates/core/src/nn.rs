//! Small float networks (conv / dense / relu / maxpool / flatten) with
//! backprop and Adam, plus the CIMW weight container.
//!
//! CIMW layout, all integers little-endian `u32`:
//! `"CIMW"`, version, record count, then per record: name length, name
//! bytes, rank, dims, and `f32` LE data. The first record is `input` with the
//! `[c, h, w]` input shape and no data. Layer records are named `conv2d`,
//! `dense`, `relu`, `maxpool2` or `flatten`; parameter layers have the weight
//! shape (`[out, in, k, k]` or `[out, in]`) and store the weights row-major
//! followed by `out` biases. Other layers have rank 0 and no data.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// `(channels, height, width)`; flat vectors are `(n, 1, 1)`.
pub type Shape = [usize; 3];

pub fn numel(s: Shape) -> usize {
    s[0] * s[1] * s[2]
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Stride 1, zero padding `k / 2`. Weights `[out][in][k][k]`.
    Conv2d { in_c: usize, out_c: usize, k: usize, w: Vec<f32>, b: Vec<f32> },
    /// Weights `[out][in]`.
    Dense { n_in: usize, n_out: usize, w: Vec<f32>, b: Vec<f32> },
    Relu,
    MaxPool2,
    Flatten,
}

impl Layer {
    pub fn tag(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::Flatten => "flatten",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Dense { .. })
    }

    pub fn out_shape(&self, s: Shape) -> Result<Shape> {
        let bad = |exp: String| Error::Shape { expected: exp, got: format!("{s:?}") };
        match self {
            Layer::Conv2d { in_c, out_c, .. } => {
                if s[0] != *in_c {
                    return Err(bad(format!("{in_c} input channels")));
                }
                Ok([*out_c, s[1], s[2]])
            }
            Layer::Dense { n_in, n_out, .. } => {
                if numel(s) != *n_in || s[1] != 1 || s[2] != 1 {
                    return Err(bad(format!("flat vector of {n_in}")));
                }
                Ok([*n_out, 1, 1])
            }
            Layer::Relu => Ok(s),
            Layer::MaxPool2 => {
                if s[1] < 2 || s[2] < 2 {
                    return Err(bad("spatial size >= 2".into()));
                }
                Ok([s[0], s[1] / 2, s[2] / 2])
            }
            Layer::Flatten => Ok([numel(s), 1, 1]),
        }
    }
}

/// Architecture description used to build freshly initialized networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv { out_c: usize, k: usize },
    Dense(usize),
    Relu,
    MaxPool2,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

/// Gradient buffers matching a network's parameters; empty for
/// parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Grads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv2d { w, b, .. } | Layer::Dense { w, b, .. } => (vec![0.0; w.len()], vec![0.0; b.len()]),
                    _ => (Vec::new(), Vec::new()),
                })
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl Network {
    /// He-initialized network with zero biases.
    pub fn init<R: Rng + ?Sized>(input: Shape, spec: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut s = input;
        let mut layers = Vec::with_capacity(spec.len());
        for ls in spec {
            let layer = match *ls {
                LayerSpec::Conv { out_c, k } => {
                    let fan_in = s[0] * k * k;
                    let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::param(e.to_string()))?;
                    Layer::Conv2d { in_c: s[0], out_c, k, w: (0..out_c * fan_in).map(|_| n.sample(rng) as f32).collect(), b: vec![0.0; out_c] }
                }
                LayerSpec::Dense(n_out) => {
                    let n_in = numel(s);
                    let n = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).map_err(|e| Error::param(e.to_string()))?;
                    Layer::Dense { n_in, n_out, w: (0..n_in * n_out).map(|_| n.sample(rng) as f32).collect(), b: vec![0.0; n_out] }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2 => Layer::MaxPool2,
                LayerSpec::Flatten => Layer::Flatten,
            };
            s = layer.out_shape(s)?;
            layers.push(layer);
        }
        Ok(Self { input, layers })
    }

    /// Input shape of each layer followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut out = vec![self.input];
        for l in &self.layers {
            let s = l.out_shape(*out.last().unwrap())?;
            out.push(s);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes()?;
        for (i, l) in self.layers.iter().enumerate() {
            let ok = match l {
                Layer::Conv2d { in_c, out_c, k, w, b } => w.len() == out_c * in_c * k * k && b.len() == *out_c && k % 2 == 1,
                Layer::Dense { n_in, n_out, w, b } => w.len() == n_in * n_out && b.len() == *n_out,
                _ => true,
            };
            if !ok {
                return Err(Error::Shape { expected: format!("consistent parameters in layer {i}"), got: l.tag().into() });
            }
        }
        Ok(())
    }

    pub fn output_len(&self) -> usize {
        self.shapes().map(|s| numel(*s.last().unwrap())).unwrap_or(0)
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut a = x.to_vec();
        let mut s = self.input;
        for l in &self.layers {
            a = layer_forward(l, &a, s);
            s = l.out_shape(s).expect("validated network");
        }
        a
    }

    /// Activations at every layer boundary (input first).
    pub fn forward_all(&self, x: &[f32]) -> Vec<Vec<f32>> {
        let mut acts = vec![x.to_vec()];
        let mut s = self.input;
        for l in &self.layers {
            let next = layer_forward(l, acts.last().unwrap(), s);
            s = l.out_shape(s).expect("validated network");
            acts.push(next);
        }
        acts
    }

    /// Accumulate parameter gradients of `dout` (gradient w.r.t. the output)
    /// given the activations from [`Network::forward_all`].
    pub fn backward(&self, acts: &[Vec<f32>], dout: &[f32], grads: &mut Grads) {
        let shapes = self.shapes().expect("validated network");
        let mut d = dout.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let (x, s) = (&acts[li], shapes[li]);
            let y = &acts[li + 1];
            let (gw, gb) = &mut grads.layers[li];
            d = layer_backward(l, x, y, s, &d, gw, gb, li > 0);
        }
    }

    /// Clamp all MAC weights (not biases) to `[-c, c]`.
    pub fn clamp_weights(&mut self, c: f32) {
        for l in &mut self.layers {
            if let Layer::Conv2d { w, .. } | Layer::Dense { w, .. } = l {
                w.iter_mut().for_each(|v| *v = v.clamp(-c, c));
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d { w, b, .. } | Layer::Dense { w, b, .. } => w.len() + b.len(),
                _ => 0,
            })
            .sum()
    }
}

fn conv_forward(x: &[f32], s: Shape, in_c: usize, out_c: usize, k: usize, w: &[f32], b: &[f32]) -> Vec<f32> {
    let (h, wd) = (s[1], s[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f32; out_c * h * wd];
    for o in 0..out_c {
        let plane = &mut out[o * h * wd..(o + 1) * h * wd];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..in_c {
            let xin = &x[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * in_c + i) * k + ky) * k + kx];
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    for yy in 0..h {
                        let sy = yy as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let row = &xin[sy as usize * wd..(sy as usize + 1) * wd];
                        let orow = &mut plane[yy * wd..(yy + 1) * wd];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (wd as isize - dx).min(wd as isize) as usize;
                        for xx in x0..x1 {
                            orow[xx] += wv * row[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn layer_forward(l: &Layer, x: &[f32], s: Shape) -> Vec<f32> {
    match l {
        Layer::Conv2d { in_c, out_c, k, w, b } => conv_forward(x, s, *in_c, *out_c, *k, w, b),
        Layer::Dense { n_in, n_out, w, b } => (0..*n_out)
            .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f32>())
            .collect(),
        Layer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        Layer::MaxPool2 => {
            let (c, h, wd) = (s[0], s[1], s[2]);
            let (oh, ow) = (h / 2, wd / 2);
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let at = |dy: usize, dx: usize| x[(ch * h + 2 * y + dy) * wd + 2 * xx + dx];
                        out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                    }
                }
            }
            out
        }
        Layer::Flatten => x.to_vec(),
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(l: &Layer, x: &[f32], y: &[f32], s: Shape, d: &[f32], gw: &mut [f32], gb: &mut [f32], need_dx: bool) -> Vec<f32> {
    match l {
        Layer::Dense { n_in, n_out, w, .. } => {
            let mut dx = vec![0.0f32; *n_in];
            for o in 0..*n_out {
                let g = d[o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let wrow = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..*n_in {
                    grow[i] += g * x[i];
                    dx[i] += g * wrow[i];
                }
            }
            dx
        }
        Layer::Conv2d { in_c, out_c, k, w, .. } => {
            let (h, wd) = (s[1], s[2]);
            let pad = (k / 2) as isize;
            let mut dx = vec![0.0f32; x.len()];
            for o in 0..*out_c {
                let dplane = &d[o * h * wd..(o + 1) * h * wd];
                gb[o] += dplane.iter().sum::<f32>();
                for i in 0..*in_c {
                    let xin = &x[i * h * wd..(i + 1) * h * wd];
                    for ky in 0..*k {
                        for kx in 0..*k {
                            let widx = ((o * in_c + i) * k + ky) * k + kx;
                            let (dy, ddx) = (ky as isize - pad, kx as isize - pad);
                            let mut acc = 0.0f32;
                            let wv = w[widx];
                            for yy in 0..h {
                                let sy = yy as isize + dy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let x0 = (-ddx).max(0) as usize;
                                let x1 = (wd as isize - ddx).min(wd as isize) as usize;
                                for xx in x0..x1 {
                                    let src = sy as usize * wd + (xx as isize + ddx) as usize;
                                    let g = dplane[yy * wd + xx];
                                    acc += g * xin[src];
                                    if need_dx {
                                        dx[i * h * wd + src] += g * wv;
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            dx
        }
        Layer::Relu => d.iter().zip(x).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect(),
        Layer::MaxPool2 => {
            let (c, h, wd) = (s[0], s[1], s[2]);
            let (oh, ow) = (h / 2, wd / 2);
            let mut dx = vec![0.0f32; x.len()];
            for ch in 0..c {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let oi = (ch * oh + yy) * ow + xx;
                        // route to the first maximal input, matching the forward max chain
                        let m = y[oi];
                        'find: for dy in 0..2 {
                            for dxx in 0..2 {
                                let src = (ch * h + 2 * yy + dy) * wd + 2 * xx + dxx;
                                if x[src] == m {
                                    dx[src] += d[oi];
                                    break 'find;
                                }
                            }
                        }
                    }
                }
            }
            dx
        }
        Layer::Flatten => d.to_vec(),
    }
}

/// Softmax cross-entropy loss and its gradient w.r.t. the logits.
pub fn softmax_xent(logits: &[f32], label: usize) -> (f32, Vec<f32>) {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f32 = exps.iter().sum();
    let mut grad: Vec<f32> = exps.iter().map(|e| e / z).collect();
    let loss = -(grad[label].max(1e-30)).ln();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(net: &Network, lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Grads::zeros_like(net), v: Grads::zeros_like(net) }
    }

    /// Apply `grads * scale` (e.g. `1 / batch`).
    pub fn step(&mut self, net: &mut Network, grads: &Grads, scale: f32) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (li, l) in net.layers.iter_mut().enumerate() {
            let (w, b) = match l {
                Layer::Conv2d { w, b, .. } | Layer::Dense { w, b, .. } => (w, b),
                _ => continue,
            };
            let (gw, gb) = &grads.layers[li];
            let (mw, mb) = &mut self.m.layers[li];
            let (vw, vb) = &mut self.v.layers[li];
            for (p, g, m, v) in [(w, gw, mw, vw), (b, gb, mb, vb)] {
                for i in 0..p.len() {
                    let gi = g[i] * scale;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

const CIMW_MAGIC: &[u8; 4] = b"CIMW";
const CIMW_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn cimw_to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CIMW_MAGIC);
    put_u32(&mut out, CIMW_VERSION);
    put_u32(&mut out, net.layers.len() as u32 + 1);
    put_record(&mut out, "input", &net.input, &[]);
    for l in &net.layers {
        match l {
            Layer::Conv2d { in_c, out_c, k, w, b } => {
                let data: Vec<f32> = w.iter().chain(b).copied().collect();
                put_record(&mut out, l.tag(), &[*out_c, *in_c, *k, *k], &data);
            }
            Layer::Dense { n_in, n_out, w, b } => {
                let data: Vec<f32> = w.iter().chain(b).copied().collect();
                put_record(&mut out, l.tag(), &[*n_out, *n_in], &data);
            }
            _ => put_record(&mut out, l.tag(), &[], &[]),
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("truncated container"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn cimw_from_bytes(buf: &[u8]) -> Result<Network> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != CIMW_MAGIC {
        return Err(Error::format("missing CIMW magic"));
    }
    let version = c.u32()?;
    if version != CIMW_VERSION {
        return Err(Error::format(format!("unsupported CIMW version {version}")));
    }
    let n = c.u32()? as usize;
    let mut input = None;
    let mut layers = Vec::new();
    for _ in 0..n {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| Error::format("layer name is not UTF-8"))?.to_string();
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(format!("implausible rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let layer = match (name.as_str(), dims.as_slice()) {
            ("input", [ch, h, w]) => {
                input = Some([*ch, *h, *w]);
                continue;
            }
            ("conv2d", &[out_c, in_c, k, k2]) if k == k2 => {
                let mut w = c.f32s(out_c * in_c * k * k + out_c)?;
                let b = w.split_off(out_c * in_c * k * k);
                Layer::Conv2d { in_c, out_c, k, w, b }
            }
            ("dense", &[n_out, n_in]) => {
                let mut w = c.f32s(n_out * n_in + n_out)?;
                let b = w.split_off(n_out * n_in);
                Layer::Dense { n_in, n_out, w, b }
            }
            ("relu", []) => Layer::Relu,
            ("maxpool2", []) => Layer::MaxPool2,
            ("flatten", []) => Layer::Flatten,
            (other, d) => return Err(Error::format(format!("unknown record {other:?} with shape {d:?}"))),
        };
        layers.push(layer);
    }
    if c.pos != buf.len() {
        return Err(Error::format("trailing bytes after last record"));
    }
    let net = Network { input: input.ok_or_else(|| Error::format("missing input record"))?, layers };
    net.validate()?;
    for l in &net.layers {
        if let Layer::Conv2d { w, b, .. } | Layer::Dense { w, b, .. } = l {
            if let Some(i) = w.iter().chain(b).position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteWeight(i));
            }
        }
    }
    Ok(net)
}

pub fn write_cimw(net: &Network, path: &Path) -> Result<()> {
    std::fs::File::create(path)?.write_all(&cimw_to_bytes(net))?;
    Ok(())
}

pub fn read_cimw(path: &Path) -> Result<Network> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    cimw_from_bytes(&buf).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format { path: Some(path.to_path_buf()), reason },
        other => other,
    })
}
