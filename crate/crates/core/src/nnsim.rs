//! Quantized networks on virtual crossbars.
//!
//! Weights are quantized symmetrically with a power-of-two per-layer scale
//! and stored offset-binary, one cell per bit. Each MAC layer's rows are cut
//! into 9-row groups; every (weight plane, group, column) is one physical
//! acc-9 unit governed by a noise profile. Activations are unsigned and
//! applied bit-serially. A read returns `clamp(round(sum eb_i x_i + eps), 0, 9)`
//! and the digital side recombines planes with shifts, then subtracts the
//! offset-binary correction `2^(b-1) * sum x`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossbar::GROUP_SIZE;
use crate::effbits::NoiseProfile;
use crate::error::{Error, Result};
use crate::nn::{numel, Layer, Network, Shape};
use crate::rng::{SimRng, Stage, Streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub w_bits: u8,
    pub a_bits: u8,
    /// Weight scale of each MAC layer (power of two).
    pub layer_scales: Vec<f64>,
    /// Input activation scale of each MAC layer.
    pub act_scales: Vec<f64>,
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.w_bits) || !(1..=16).contains(&self.a_bits) {
            return Err(Error::param("bit-widths must be in 1..=16"));
        }
        if self.layer_scales.len() != self.act_scales.len() {
            return Err(Error::param("one weight and one activation scale per MAC layer"));
        }
        if self.layer_scales.iter().chain(&self.act_scales).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::param("scales must be positive and finite"));
        }
        Ok(())
    }

    /// Weight scales from the weights, activation scales from the largest
    /// MAC-layer input seen on `calib` inputs.
    pub fn calibrate(net: &Network, w_bits: u8, a_bits: u8, calib: &[Vec<f32>]) -> Result<Self> {
        net.validate()?;
        let mut layer_scales = Vec::new();
        let mut mac_idx = Vec::new();
        for (i, l) in net.layers.iter().enumerate() {
            if let Layer::Conv2d { w, .. } | Layer::Dense { w, .. } = l {
                if let Some(j) = w.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteWeight(j));
                }
                let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
                layer_scales.push(weight_scale(max, w_bits));
                mac_idx.push(i);
            }
        }
        let mut maxes = vec![0.0f64; mac_idx.len()];
        for x in calib {
            let acts = net.forward_all(x);
            for (k, &li) in mac_idx.iter().enumerate() {
                let m = acts[li].iter().fold(0.0f64, |m, v| m.max(*v as f64));
                maxes[k] = maxes[k].max(m);
            }
        }
        let levels = ((1u64 << a_bits) - 1) as f64;
        let act_scales = maxes.iter().map(|&m| if m > 0.0 { m / levels } else { 1.0 }).collect();
        let spec = Self { w_bits, a_bits, layer_scales, act_scales };
        spec.validate()?;
        Ok(spec)
    }
}

/// Smallest power of two `s` with `max_abs / s <= 2^(b-1) - 1` (at least 1 level).
pub fn weight_scale(max_abs: f64, w_bits: u8) -> f64 {
    let top = (((1u64 << (w_bits - 1)) as f64) - 1.0).max(1.0);
    if max_abs <= 0.0 {
        return 1.0;
    }
    2f64.powi((max_abs / top).log2().ceil() as i32)
}

/// Offset-binary codes of `round(w / scale)` clamped to the signed range.
pub fn quantize_weights(w: &[f32], scale: f64, w_bits: u8) -> Result<Vec<u32>> {
    let half = 1i64 << (w_bits - 1);
    w.iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() {
                return Err(Error::NonFiniteWeight(i));
            }
            let q = ((v as f64 / scale).round() as i64).clamp(-half, half - 1);
            Ok((q + half) as u32)
        })
        .collect()
}

pub fn dequantize_weight(code: u32, scale: f64, w_bits: u8) -> f64 {
    (code as i64 - (1i64 << (w_bits - 1))) as f64 * scale
}

/// Copy of `net` with every MAC weight replaced by its `w_bits` dequantized
/// value. Used for quantization-aware training with a straight-through
/// gradient: forward and backward run on this copy, updates go to `net`.
pub fn fake_quantize(net: &Network, w_bits: u8) -> Result<Network> {
    let mut out = net.clone();
    for l in &mut out.layers {
        if let Layer::Conv2d { w, .. } | Layer::Dense { w, .. } = l {
            let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
            let s = weight_scale(max, w_bits);
            let codes = quantize_weights(w, s, w_bits)?;
            for (v, c) in w.iter_mut().zip(codes) {
                *v = dequantize_weight(c, s, w_bits) as f32;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn quantize_activation(x: f32, scale: f64, a_bits: u8) -> u32 {
    let top = ((1u64 << a_bits) - 1) as f64;
    (x as f64 / scale).round().clamp(0.0, top) as u32
}

/// Float pre-activation from an integer accumulator.
#[inline]
pub fn dequant(acc: i64, w_scale: f64, a_scale: f64, bias: f32) -> f32 {
    (acc as f64 * (w_scale * a_scale) + bias as f64) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MacKind {
    Conv { in_c: usize, out_c: usize, k: usize, h: usize, w: usize },
    Dense { n_in: usize, n_out: usize },
}

impl MacKind {
    /// MAC length (crossbar rows).
    pub fn rows(&self) -> usize {
        match *self {
            MacKind::Conv { in_c, k, .. } => in_c * k * k,
            MacKind::Dense { n_in, .. } => n_in,
        }
    }

    /// Outputs per read (crossbar columns).
    pub fn cols(&self) -> usize {
        match *self {
            MacKind::Conv { out_c, .. } => out_c,
            MacKind::Dense { n_out, .. } => n_out,
        }
    }

    pub fn positions(&self) -> usize {
        match *self {
            MacKind::Conv { h, w, .. } => h * w,
            MacKind::Dense { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantMac {
    pub kind: MacKind,
    /// `[col][row]` offset-binary codes; conv rows are `(in_c, ky, kx)`.
    pub codes: Vec<u32>,
    pub bias: Vec<f32>,
    pub w_scale: f64,
    pub a_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QuantOp {
    Mac(QuantMac),
    Relu,
    MaxPool2,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantNetwork {
    pub input: Shape,
    pub ops: Vec<QuantOp>,
    pub spec: QuantSpec,
}

impl QuantNetwork {
    pub fn macs(&self) -> impl Iterator<Item = &QuantMac> {
        self.ops.iter().filter_map(|o| match o {
            QuantOp::Mac(m) => Some(m),
            _ => None,
        })
    }
}

pub fn quantize_network(net: &Network, spec: &QuantSpec) -> Result<QuantNetwork> {
    spec.validate()?;
    let shapes = net.shapes()?;
    let n_mac = net.layers.iter().filter(|l| l.has_params()).count();
    if n_mac != spec.layer_scales.len() {
        return Err(Error::Shape { expected: format!("{n_mac} layer scales"), got: spec.layer_scales.len().to_string() });
    }
    let mut k_mac = 0;
    let mut ops = Vec::with_capacity(net.layers.len());
    for (li, l) in net.layers.iter().enumerate() {
        let op = match l {
            Layer::Conv2d { in_c, out_c, k, w, b } => {
                let (s, a) = (spec.layer_scales[k_mac], spec.act_scales[k_mac]);
                k_mac += 1;
                QuantOp::Mac(QuantMac {
                    kind: MacKind::Conv { in_c: *in_c, out_c: *out_c, k: *k, h: shapes[li][1], w: shapes[li][2] },
                    codes: quantize_weights(w, s, spec.w_bits)?,
                    bias: b.clone(),
                    w_scale: s,
                    a_scale: a,
                })
            }
            Layer::Dense { n_in, n_out, w, b } => {
                let (s, a) = (spec.layer_scales[k_mac], spec.act_scales[k_mac]);
                k_mac += 1;
                QuantOp::Mac(QuantMac {
                    kind: MacKind::Dense { n_in: *n_in, n_out: *n_out },
                    codes: quantize_weights(w, s, spec.w_bits)?,
                    bias: b.clone(),
                    w_scale: s,
                    a_scale: a,
                })
            }
            Layer::Relu => QuantOp::Relu,
            Layer::MaxPool2 => QuantOp::MaxPool2,
            Layer::Flatten => QuantOp::Flatten,
        };
        ops.push(op);
    }
    Ok(QuantNetwork { input: net.input, ops, spec: spec.clone() })
}

fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn maxpool2(x: &[f32], s: Shape) -> (Vec<f32>, Shape) {
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    (out, [c, oh, ow])
}

/// Pure integer forward pass: `sum (code - 2^(b-1)) * q(x)` per output,
/// computed with direct convolution loops.
pub fn oracle_forward(q: &QuantNetwork, x: &[f32]) -> Vec<f32> {
    let (wb, ab) = (q.spec.w_bits, q.spec.a_bits);
    let half = 1i64 << (wb - 1);
    let mut a = x.to_vec();
    let mut s = q.input;
    for op in &q.ops {
        match op {
            QuantOp::Mac(m) => {
                let qx: Vec<i64> = a.iter().map(|&v| quantize_activation(v, m.a_scale, ab) as i64).collect();
                match m.kind {
                    MacKind::Dense { n_in, n_out } => {
                        a = (0..n_out)
                            .map(|o| {
                                let acc: i64 = (0..n_in).map(|i| (m.codes[o * n_in + i] as i64 - half) * qx[i]).sum();
                                dequant(acc, m.w_scale, m.a_scale, m.bias[o])
                            })
                            .collect();
                        s = [n_out, 1, 1];
                    }
                    MacKind::Conv { in_c, out_c, k, h, w } => {
                        let pad = (k / 2) as isize;
                        let mut out = Vec::with_capacity(out_c * h * w);
                        for o in 0..out_c {
                            for y in 0..h as isize {
                                for xx in 0..w as isize {
                                    let mut acc = 0i64;
                                    for i in 0..in_c {
                                        for ky in 0..k as isize {
                                            for kx in 0..k as isize {
                                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                                    continue;
                                                }
                                                let wq = m.codes[((o * in_c + i) * k + ky as usize) * k + kx as usize] as i64 - half;
                                                acc += wq * qx[(i * h + sy as usize) * w + sx as usize];
                                            }
                                        }
                                    }
                                    out.push(dequant(acc, m.w_scale, m.a_scale, m.bias[o]));
                                }
                            }
                        }
                        a = out;
                        s = [out_c, h, w];
                    }
                }
            }
            QuantOp::Relu => a = relu(&a),
            QuantOp::MaxPool2 => (a, s) = maxpool2(&a, s),
            QuantOp::Flatten => s = [numel(s), 1, 1],
        }
    }
    a
}

/// One MAC layer laid out on acc-9 units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedLayer {
    pub rows: usize,
    pub cols: usize,
    pub n_groups: usize,
    pub w_bits: u8,
    /// Programmed bits, `[plane][group][col][cell]`; padding cells are 0.
    pub bits: Vec<u8>,
    /// Effective values, same layout as `bits`.
    pub eb: Vec<f64>,
    /// Profile index of each `[plane][group][col]` unit.
    pub assign: Vec<u32>,
}

impl MappedLayer {
    #[inline]
    pub fn unit(&self, plane: usize, group: usize, col: usize) -> usize {
        (plane * self.n_groups + group) * self.cols + col
    }

    /// Offset-binary code of `(col, row)` rebuilt from the planes.
    pub fn code(&self, col: usize, row: usize) -> u32 {
        let (g, c) = (row / GROUP_SIZE, row % GROUP_SIZE);
        (0..self.w_bits as usize).map(|p| (self.bits[self.unit(p, g, col) * GROUP_SIZE + c] as u32) << p).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedNetwork {
    pub quant: QuantNetwork,
    pub layers: Vec<MappedLayer>,
    pub profiles: Vec<NoiseProfile>,
    pub rng_seed: u64,
}

fn map_layer(m: &QuantMac, w_bits: u8, next_unit: &mut usize, perm: &[u32]) -> MappedLayer {
    let (rows, cols) = (m.kind.rows(), m.kind.cols());
    let n_groups = rows.div_ceil(GROUP_SIZE);
    let n_units = w_bits as usize * n_groups * cols;
    let mut bits = vec![0u8; n_units * GROUP_SIZE];
    let mut layer = MappedLayer { rows, cols, n_groups, w_bits, bits: Vec::new(), eb: Vec::new(), assign: Vec::with_capacity(n_units) };
    for p in 0..w_bits as usize {
        for g in 0..n_groups {
            for c in 0..cols {
                let u = layer.unit(p, g, c);
                for cell in 0..GROUP_SIZE {
                    let row = g * GROUP_SIZE + cell;
                    if row < rows {
                        bits[u * GROUP_SIZE + cell] = ((m.codes[c * rows + row] >> p) & 1) as u8;
                    }
                }
            }
        }
    }
    for _ in 0..n_units {
        layer.assign.push(perm[*next_unit % perm.len()]);
        *next_unit += 1;
    }
    layer.eb = bits.iter().map(|&b| b as f64).collect();
    layer.bits = bits;
    layer
}

/// Lay the quantized network out on acc-9 units. Units are assigned to
/// profiles round-robin in a seeded permutation of the profile list;
/// `eb` starts at the exact bits.
pub fn map_network(q: &QuantNetwork, profiles: Vec<NoiseProfile>, streams: &Streams) -> Result<MappedNetwork> {
    if profiles.is_empty() {
        return Err(Error::MissingProfile("no profiles supplied".into()));
    }
    let mut perm: Vec<u32> = (0..profiles.len() as u32).collect();
    let mut rng = streams.stream(Stage::Map, &[]);
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut next = 0usize;
    let layers = q.macs().map(|m| map_layer(m, q.spec.w_bits, &mut next, &perm)).collect();
    Ok(MappedNetwork { quant: q.clone(), layers, profiles, rng_seed: streams.master })
}

impl MappedNetwork {
    /// Swap in new profiles for the same scope units (e.g. after drift).
    pub fn with_profiles(&self, profiles: Vec<NoiseProfile>) -> Result<MappedNetwork> {
        let mut index = Vec::with_capacity(self.profiles.len());
        for old in &self.profiles {
            let pos = profiles.iter().position(|p| p.scope == old.scope).ok_or_else(|| Error::MissingProfile(old.scope.to_string()))?;
            index.push(pos as u32);
        }
        let mut out = self.clone();
        for l in &mut out.layers {
            for a in &mut l.assign {
                *a = index[*a as usize];
            }
        }
        out.profiles = profiles;
        Ok(out)
    }

    /// Integer codes rebuilt from the programmed planes, per MAC layer.
    pub fn reconstruct_codes(&self) -> Vec<Vec<u32>> {
        self.layers.iter().map(|l| (0..l.cols).flat_map(|c| (0..l.rows).map(move |r| (c, r))).map(|(c, r)| l.code(c, r)).collect()).collect()
    }
}

/// Replace every programmed bit with a draw from `N(mu_b, sigma_b)` of its
/// unit's profile. One standard normal is drawn per cell regardless of sigma,
/// so re-injection after a profile update reuses the same deviates.
pub fn inject_static(net: &MappedNetwork, streams: &Streams) -> MappedNetwork {
    let mut out = net.clone();
    for (li, l) in out.layers.iter_mut().enumerate() {
        let mut rng = streams.stream(Stage::Inject, &[li as u64]);
        for u in 0..l.assign.len() {
            let prof = &net.profiles[l.assign[u] as usize];
            for c in 0..GROUP_SIZE {
                let i = u * GROUP_SIZE + c;
                let (mu, sigma) = prof.mean_sigma(l.bits[i]);
                let z: f64 = StandardNormal.sample(&mut rng);
                l.eb[i] = mu + sigma * z;
            }
        }
    }
    out
}

/// Noisy MAC of one layer for one input tensor.
fn noisy_mac(m: &QuantMac, l: &MappedLayer, profiles: &[NoiseProfile], a_bits: u8, x: &[f32], rng: &mut SimRng) -> Vec<f32> {
    let qx: Vec<u32> = x.iter().map(|&v| quantize_activation(v, m.a_scale, a_bits)).collect();
    let (rows, cols) = (l.rows, l.cols);
    let half = 1i64 << (l.w_bits - 1);
    let dynamic: Vec<bool> = profiles.iter().map(|p| !p.residual_hist.is_degenerate_at_zero()).collect();
    let mut vec = vec![0u32; l.n_groups * GROUP_SIZE];
    let mut out = vec![0.0f32; cols * m.kind.positions()];
    let mut acc = vec![0i64; cols];
    for pos in 0..m.kind.positions() {
        // gather the input vector of this read position
        match m.kind {
            MacKind::Dense { .. } => vec[..rows].copy_from_slice(&qx),
            MacKind::Conv { in_c, k, h, w, .. } => {
                let (y, xx) = ((pos / w) as isize, (pos % w) as isize);
                let pad = (k / 2) as isize;
                for i in 0..in_c {
                    for ky in 0..k as isize {
                        for kx in 0..k as isize {
                            let (sy, sx) = (y + ky - pad, xx + kx - pad);
                            let r = (i * k + ky as usize) * k + kx as usize;
                            vec[r] = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize { 0 } else { qx[(i * h + sy as usize) * w + sx as usize] };
                        }
                    }
                }
            }
        }
        acc.iter_mut().for_each(|a| *a = 0);
        let sum_x: i64 = vec[..rows].iter().map(|&v| v as i64).sum();
        for q in 0..a_bits as usize {
            for g in 0..l.n_groups {
                let xs = &vec[g * GROUP_SIZE..(g + 1) * GROUP_SIZE];
                let mask: u16 = (0..GROUP_SIZE).filter(|&c| (xs[c] >> q) & 1 == 1).fold(0, |m, c| m | (1 << c));
                if mask == 0 {
                    continue;
                }
                for p in 0..l.w_bits as usize {
                    for c in 0..cols {
                        let u = l.unit(p, g, c);
                        let cells = &l.eb[u * GROUP_SIZE..(u + 1) * GROUP_SIZE];
                        let mut raw = 0.0f64;
                        for (cell, e) in cells.iter().enumerate() {
                            if mask >> cell & 1 == 1 {
                                raw += e;
                            }
                        }
                        let pi = l.assign[u] as usize;
                        if dynamic[pi] {
                            raw += profiles[pi].residual_hist.sample(rng);
                        }
                        let partial = raw.round().clamp(0.0, GROUP_SIZE as f64) as i64;
                        acc[c] += partial << (p + q);
                    }
                }
            }
        }
        for c in 0..cols {
            let total = acc[c] - half * sum_x;
            out[c * m.kind.positions() + pos] = dequant(total, m.w_scale, m.a_scale, m.bias[c]);
        }
    }
    out
}

/// Bit-serial noisy forward pass of one input.
pub fn noisy_forward(net: &MappedNetwork, x: &[f32], rng: &mut SimRng) -> Vec<f32> {
    let q = &net.quant;
    let mut a = x.to_vec();
    let mut s = q.input;
    let mut li = 0;
    for op in &q.ops {
        match op {
            QuantOp::Mac(m) => {
                a = noisy_mac(m, &net.layers[li], &net.profiles, q.spec.a_bits, &a, rng);
                s = match m.kind {
                    MacKind::Conv { out_c, h, w, .. } => [out_c, h, w],
                    MacKind::Dense { n_out, .. } => [n_out, 1, 1],
                };
                li += 1;
            }
            QuantOp::Relu => a = relu(&a),
            QuantOp::MaxPool2 => (a, s) = maxpool2(&a, s),
            QuantOp::Flatten => s = [numel(s), 1, 1],
        }
    }
    a
}

/// Forward a batch; input `i` draws its dynamic noise from `(Forward, i)`.
pub fn noisy_forward_batch(net: &MappedNetwork, inputs: &[Vec<f32>], streams: &Streams) -> Vec<Vec<f32>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| noisy_forward(net, x, &mut streams.stream(Stage::Forward, &[i as u64])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::ScopeUnit;
    use crate::effbits::ResidualDist;
    use crate::nn::LayerSpec;
    use proptest::prelude::*;

    fn mlp(seed: u64) -> Network {
        Network::init([8, 1, 1], &[LayerSpec::Dense(32), LayerSpec::Relu, LayerSpec::Dense(4)], &mut Streams::new(seed).stream(Stage::Train, &[])).unwrap()
    }

    fn quantized(net: &Network, wb: u8, ab: u8) -> QuantNetwork {
        let calib: Vec<Vec<f32>> = (0..20).map(|i| (0..8).map(|j| ((i * 3 + j) % 5) as f32 / 4.0).collect()).collect();
        quantize_network(net, &QuantSpec::calibrate(net, wb, ab, &calib).unwrap()).unwrap()
    }

    fn noisy_profile(scope: ScopeUnit) -> NoiseProfile {
        NoiseProfile {
            scope,
            mu0: 0.05,
            sigma0: 0.1,
            mu1: 0.9,
            sigma1: 0.1,
            n0: 1,
            n1: 1,
            residual_hist: ResidualDist::from_samples(vec![-1.0, 0.0, 0.0, 0.0, 1.0], 3).unwrap(),
        }
    }

    #[test]
    fn zero_weight_is_midpoint_code() {
        for b in 1..=8u8 {
            assert_eq!(quantize_weights(&[0.0], 0.25, b).unwrap(), vec![1u32 << (b - 1)]);
        }
        // saturation
        assert_eq!(quantize_weights(&[100.0], 0.25, 4).unwrap(), vec![15]);
        assert!(matches!(quantize_weights(&[1.0, f32::INFINITY], 0.25, 4), Err(Error::NonFiniteWeight(1))));
    }

    #[test]
    fn fake_quantized_grid_nests_in_wider_grids() {
        let net = fake_quantize(&mlp(5), 4).unwrap();
        assert_eq!(fake_quantize(&net, 4).unwrap(), net);
        for b in [5u8, 6, 8] {
            assert_eq!(fake_quantize(&net, b).unwrap(), net, "{b} bits");
        }
    }

    #[test]
    fn quantizer_roundtrip_error_bounded() {
        let net = mlp(3);
        let Layer::Dense { w, .. } = &net.layers[0] else { unreachable!() };
        for b in [2u8, 4, 6, 8] {
            let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
            let s = weight_scale(max, b);
            let codes = quantize_weights(w, s, b).unwrap();
            for (v, c) in w.iter().zip(codes) {
                let q = (*v as f64 / s).round();
                if q >= -((1 << (b - 1)) as f64) && q <= ((1 << (b - 1)) - 1) as f64 {
                    assert!((dequantize_weight(c, s, b) - *v as f64).abs() <= s / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn padding_layout() {
        let m = |rows: usize| QuantMac { kind: MacKind::Dense { n_in: rows, n_out: 2 }, codes: vec![5; rows * 2], bias: vec![0.0; 2], w_scale: 1.0, a_scale: 1.0 };
        let l18 = map_layer(&m(18), 4, &mut 0, &[0]);
        assert_eq!(l18.n_groups, 2);
        let l10 = map_layer(&m(10), 4, &mut 0, &[0]);
        assert_eq!(l10.n_groups, 2);
        for p in 0..4 {
            let u = l10.unit(p, 1, 0);
            assert!(l10.bits[u * 9 + 1..(u + 1) * 9].iter().all(|&b| b == 0));
        }
    }

    #[test]
    fn mapping_is_lossless_and_replayable() {
        let q = quantized(&mlp(5), 6, 6);
        let profiles: Vec<_> = (0..80).map(|i| NoiseProfile::ideal(ScopeUnit::Adc { module: i / 8, lane: i % 8 })).collect();
        let s = Streams::new(9);
        let a = map_network(&q, profiles.clone(), &s).unwrap();
        let codes: Vec<Vec<u32>> = q.macs().map(|m| m.codes.clone()).collect();
        assert_eq!(a.reconstruct_codes(), codes);
        assert_eq!(map_network(&q, profiles.clone(), &s).unwrap(), a);
        assert_ne!(map_network(&q, profiles, &Streams::new(10)).unwrap().layers[0].assign, a.layers[0].assign);
        assert!(matches!(map_network(&q, vec![], &s), Err(Error::MissingProfile(_))));
    }

    #[test]
    fn ideal_injection_is_identity() {
        let q = quantized(&mlp(6), 4, 4);
        let net = map_network(&q, vec![NoiseProfile::ideal(ScopeUnit::Global)], &Streams::new(1)).unwrap();
        let inj = inject_static(&net, &Streams::new(2));
        assert_eq!(inj, net);
    }

    #[test]
    fn injection_deterministic_and_centered() {
        let q = quantized(&mlp(6), 8, 4);
        let net = map_network(&q, vec![noisy_profile(ScopeUnit::Global)], &Streams::new(1)).unwrap();
        let a = inject_static(&net, &Streams::new(2));
        assert_eq!(a, inject_static(&net, &Streams::new(2)));
        let ones: Vec<f64> = a.layers.iter().flat_map(|l| l.bits.iter().zip(&l.eb).filter(|(b, _)| **b == 1).map(|(_, e)| *e)).collect();
        let mean = ones.iter().sum::<f64>() / ones.len() as f64;
        assert!((mean - 0.9).abs() < 3.0 * 0.1 / (ones.len() as f64).sqrt(), "mean {mean} over {}", ones.len());
    }

    #[test]
    fn ideal_forward_matches_oracle() {
        let net = mlp(11);
        for (wb, ab) in [(2u8, 2u8), (4, 6), (8, 8)] {
            let q = quantized(&net, wb, ab);
            let m = map_network(&q, vec![NoiseProfile::ideal(ScopeUnit::Global)], &Streams::new(1)).unwrap();
            let s = Streams::new(4);
            for i in 0..50u64 {
                let x: Vec<f32> = (0..8).map(|j| ((i * 7 + j * 3) % 11) as f32 / 10.0).collect();
                assert_eq!(noisy_forward(&m, &x, &mut s.stream(Stage::Forward, &[i])), oracle_forward(&q, &x));
            }
        }
    }

    #[test]
    fn zero_input_gives_bias() {
        let q = quantized(&mlp(12), 4, 4);
        let m = inject_static(&map_network(&q, vec![noisy_profile(ScopeUnit::Global)], &Streams::new(1)).unwrap(), &Streams::new(2));
        let out = noisy_forward(&m, &[0.0; 8], &mut Streams::new(3).stream(Stage::Forward, &[]));
        assert_eq!(out, oracle_forward(&q, &[0.0; 8]));
    }

    #[test]
    fn noisy_outputs_vary_across_seeds() {
        let q = quantized(&mlp(13), 6, 6);
        let m = inject_static(&map_network(&q, vec![noisy_profile(ScopeUnit::Global)], &Streams::new(1)).unwrap(), &Streams::new(2));
        let x = vec![0.7f32; 8];
        let outs: Vec<f32> = (0..40).map(|s| noisy_forward(&m, &x, &mut Streams::new(s).stream(Stage::Forward, &[]))[0]).collect();
        let mean = outs.iter().sum::<f32>() / outs.len() as f32;
        assert!(outs.iter().any(|v| (v - mean).abs() > 0.0));
    }

    #[test]
    fn batch_matches_serial() {
        let q = quantized(&mlp(14), 6, 6);
        let m = inject_static(&map_network(&q, vec![noisy_profile(ScopeUnit::Global)], &Streams::new(1)).unwrap(), &Streams::new(2));
        let inputs: Vec<Vec<f32>> = (0..16).map(|i| vec![i as f32 / 16.0; 8]).collect();
        let s = Streams::new(8);
        let batch = noisy_forward_batch(&m, &inputs, &s);
        for (i, x) in inputs.iter().enumerate() {
            assert_eq!(batch[i], noisy_forward(&m, x, &mut s.stream(Stage::Forward, &[i as u64])));
        }
    }

    #[test]
    fn profile_swap_requires_same_units() {
        let q = quantized(&mlp(15), 4, 4);
        let m = map_network(&q, vec![NoiseProfile::ideal(ScopeUnit::Module(0)), NoiseProfile::ideal(ScopeUnit::Module(1))], &Streams::new(1)).unwrap();
        let swapped = m.with_profiles(vec![noisy_profile(ScopeUnit::Module(1)), noisy_profile(ScopeUnit::Module(0))]).unwrap();
        for (a, b) in m.layers[0].assign.iter().zip(&swapped.layers[0].assign) {
            assert_eq!(m.profiles[*a as usize].scope, swapped.profiles[*b as usize].scope);
        }
        assert!(matches!(m.with_profiles(vec![noisy_profile(ScopeUnit::Module(0))]), Err(Error::MissingProfile(_))));
    }

    proptest! {
        #[test]
        fn partials_clamped(seed in any::<u64>(), bias in -20.0f64..20.0) {
            // extreme profiles still produce integer accumulators within the clamp bounds
            let q = quantized(&mlp(16), 4, 4);
            let mut p = noisy_profile(ScopeUnit::Global);
            p.mu1 = bias;
            let m = inject_static(&map_network(&q, vec![p], &Streams::new(seed)).unwrap(), &Streams::new(seed));
            let QuantOp::Mac(mac) = &q.ops[0] else { unreachable!() };
            let x = vec![1.0f32; 8];
            let out = noisy_mac(mac, &m.layers[0], &m.profiles, 4, &x, &mut Streams::new(seed).stream(Stage::Forward, &[]));
            // max possible accumulator: every partial at 9
            let qx = quantize_activation(1.0, mac.a_scale, 4) as i64;
            let top = 9 * ((1i64 << 4) - 1) * ((1i64 << 4) - 1) - 8 * 8 * qx;
            let low = -8 * 8 * qx;
            for (c, v) in out.iter().enumerate() {
                let acc = ((*v as f64 - mac.bias[c] as f64) / (mac.w_scale * mac.a_scale)).round() as i64;
                prop_assert!(acc >= low - 1 && acc <= top + 1);
            }
        }
    }
}
