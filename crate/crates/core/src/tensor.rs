//! Dense tensors and the handful of layers the toy backbones need.
//!
//! Everything is 32-bit, row-major `(h, w, c)`, and accumulates in a fixed
//! left-to-right order so that repeated runs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 3-D array laid out as `(h, w, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

/// Visual tokens share the feature-map layout: `(token rows, token cols, dim)`.
pub type TokenGrid = Tensor3;

impl Tensor3 {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape {
                axis: "data length",
                expected: h * w * c,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("non-finite value at flat index {pos}")));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor3 {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Self {
        Tensor3 {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        Tensor3 { h, w, c, data }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[(i * self.w + j) * self.c + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        self.data[(i * self.w + j) * self.c + k] = v;
    }

    /// Channel vector at cell `(i, j)`.
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.w + j) * self.c;
        &self.data[start..start + self.c]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f32] {
        let start = (i * self.w + j) * self.c;
        &mut self.data[start..start + self.c]
    }

    /// Bitwise equality, treating `-0.0` and `0.0` as distinct.
    pub fn bit_eq(&self, other: &Tensor3) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// Zero padding of `(k - 1) / 2` cells on every side.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad: Padding,
    pub cin: usize,
    pub cout: usize,
    /// Apply ReLU after the convolution when run inside a model.
    #[serde(default)]
    pub relu: bool,
}

impl ConvSpec {
    pub fn pad_h(&self) -> usize {
        match self.pad {
            Padding::Valid => 0,
            Padding::Same => (self.kh - 1) / 2,
        }
    }

    pub fn pad_w(&self) -> usize {
        match self.pad {
            Padding::Valid => 0,
            Padding::Same => (self.kw - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub k: usize,
    pub s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEmbedSpec {
    pub ph: usize,
    pub pw: usize,
    pub cin: usize,
    pub d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    /// Sub-group extent in tokens.
    pub gh: usize,
    pub gw: usize,
    pub heads: usize,
    pub d: usize,
}

/// One layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaxPool(PoolSpec),
    PatchEmbed(PatchEmbedSpec),
    LocalAttention(AttentionSpec),
    LayerNorm { d: usize },
    Mlp { d: usize, hidden: usize },
    PooledLinearHead { d: usize, n_classes: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("{name} must be >= 1")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv(c) => {
                for (n, v) in [
                    ("kh", c.kh),
                    ("kw", c.kw),
                    ("sh", c.sh),
                    ("sw", c.sw),
                    ("cin", c.cin),
                    ("cout", c.cout),
                ] {
                    positive(n, v)?;
                }
            }
            LayerSpec::MaxPool(p) => {
                positive("k", p.k)?;
                positive("s", p.s)?;
            }
            LayerSpec::PatchEmbed(p) => {
                for (n, v) in [("ph", p.ph), ("pw", p.pw), ("cin", p.cin), ("d", p.d)] {
                    positive(n, v)?;
                }
            }
            LayerSpec::LocalAttention(a) => {
                for (n, v) in [("gh", a.gh), ("gw", a.gw), ("heads", a.heads), ("d", a.d)] {
                    positive(n, v)?;
                }
                if a.d % a.heads != 0 {
                    return Err(Error::config(format!(
                        "embedding dim {} is not divisible by {} heads",
                        a.d, a.heads
                    )));
                }
            }
            LayerSpec::LayerNorm { d } => positive("d", d)?,
            LayerSpec::Mlp { d, hidden } => {
                positive("d", d)?;
                positive("hidden", hidden)?;
            }
            LayerSpec::PooledLinearHead { d, n_classes } => {
                positive("d", d)?;
                positive("n_classes", n_classes)?;
            }
        }
        Ok(())
    }

    /// Named parameter blocks and their shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv(c) => vec![
                ("kernel", vec![c.kh, c.kw, c.cin, c.cout]),
                ("bias", vec![c.cout]),
            ],
            LayerSpec::PatchEmbed(p) => vec![
                ("kernel", vec![p.ph, p.pw, p.cin, p.d]),
                ("bias", vec![p.d]),
            ],
            LayerSpec::LocalAttention(a) => vec![
                ("wq", vec![a.d, a.d]),
                ("bq", vec![a.d]),
                ("wk", vec![a.d, a.d]),
                ("bk", vec![a.d]),
                ("wv", vec![a.d, a.d]),
                ("bv", vec![a.d]),
                ("wo", vec![a.d, a.d]),
                ("bo", vec![a.d]),
            ],
            LayerSpec::LayerNorm { d } => vec![("gain", vec![d]), ("bias", vec![d])],
            LayerSpec::Mlp { d, hidden } => vec![
                ("w1", vec![d, hidden]),
                ("b1", vec![hidden]),
                ("w2", vec![hidden, d]),
                ("b2", vec![d]),
            ],
            LayerSpec::PooledLinearHead { d, n_classes } => {
                vec![("weight", vec![d, n_classes]), ("bias", vec![n_classes])]
            }
            LayerSpec::MaxPool(_) => Vec::new(),
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self, LayerSpec::LocalAttention(_))
    }

    /// Output dims for the given input dims.
    pub fn output_dims(&self, (h, w, c): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv(cv) => {
                check_channels(cv.cin, c)?;
                let oh = conv_out(h, cv.kh, cv.sh, cv.pad_h(), "height")?;
                let ow = conv_out(w, cv.kw, cv.sw, cv.pad_w(), "width")?;
                Ok((oh, ow, cv.cout))
            }
            LayerSpec::MaxPool(p) => Ok((
                conv_out(h, p.k, p.s, 0, "height")?,
                conv_out(w, p.k, p.s, 0, "width")?,
                c,
            )),
            LayerSpec::PatchEmbed(p) => {
                check_channels(p.cin, c)?;
                if h % p.ph != 0 || w % p.pw != 0 {
                    return Err(Error::config(format!(
                        "image {h}x{w} is not divisible into {}x{} patches",
                        p.ph, p.pw
                    )));
                }
                Ok((h / p.ph, w / p.pw, p.d))
            }
            LayerSpec::LocalAttention(a) => {
                check_channels(a.d, c)?;
                if h % a.gh != 0 || w % a.gw != 0 {
                    return Err(Error::config(format!(
                        "attention group {}x{} does not tile the {h}x{w} token grid",
                        a.gh, a.gw
                    )));
                }
                Ok((h, w, c))
            }
            LayerSpec::LayerNorm { d } | LayerSpec::Mlp { d, .. } => {
                check_channels(d, c)?;
                Ok((h, w, c))
            }
            LayerSpec::PooledLinearHead { d, n_classes } => {
                check_channels(d, c)?;
                Ok((1, 1, n_classes))
            }
        }
    }

    /// Multiply-accumulate count for one forward pass on input dims.
    pub fn macs(&self, dims: (usize, usize, usize)) -> Result<u64> {
        let (h, w, c) = dims;
        let (oh, ow, oc) = self.output_dims(dims)?;
        let cells = (h * w) as u64;
        Ok(match *self {
            LayerSpec::Conv(cv) => (oh * ow * oc * cv.kh * cv.kw * cv.cin) as u64,
            LayerSpec::MaxPool(p) => (oh * ow * oc * p.k * p.k) as u64,
            LayerSpec::PatchEmbed(p) => (oh * ow * p.d * p.ph * p.pw * p.cin) as u64,
            LayerSpec::LocalAttention(a) => {
                let group = (a.gh * a.gw) as u64;
                let d = a.d as u64;
                // q/k/v/o projections plus scores and weighted sums within each group
                4 * cells * d * d + 2 * cells * group * d
            }
            LayerSpec::LayerNorm { d } => 2 * cells * d as u64,
            LayerSpec::Mlp { d, hidden } => 2 * cells * (d * hidden) as u64,
            LayerSpec::PooledLinearHead { d, n_classes } => {
                cells * c as u64 + (d * n_classes) as u64
            }
        })
    }
}

fn check_channels(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            axis: "channels",
            expected,
            got,
        });
    }
    Ok(())
}

fn conv_out(n: usize, k: usize, s: usize, pad: usize, axis: &'static str) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::Shape {
            axis,
            expected: k,
            got: padded,
        });
    }
    Ok((padded - k) / s + 1)
}

fn check_len(axis: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { axis, expected, got });
    }
    Ok(())
}

/// `out = x · w + b` with `w` stored `[in][out]`.
#[inline]
pub fn linear(x: &[f32], w: &[f32], b: &[f32], out: &mut [f32]) {
    let n_out = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// 2-D convolution with kernel stored `[kh][kw][cin][cout]`. No activation.
pub fn conv2d(input: &Tensor3, spec: &ConvSpec, kernel: &[f32], bias: &[f32]) -> Result<Tensor3> {
    check_len("kernel", spec.kh * spec.kw * spec.cin * spec.cout, kernel.len())?;
    check_len("bias", spec.cout, bias.len())?;
    let (oh, ow, oc) = LayerSpec::Conv(*spec).output_dims(input.dims())?;
    let (ph, pw) = (spec.pad_h() as isize, spec.pad_w() as isize);
    let mut out = Tensor3::zeros(oh, ow, oc);
    let mut acc = vec![0.0f32; oc];
    for oi in 0..oh {
        for oj in 0..ow {
            acc.copy_from_slice(bias);
            for ki in 0..spec.kh {
                let ii = (oi * spec.sh + ki) as isize - ph;
                if ii < 0 || ii >= input.h as isize {
                    continue;
                }
                for kj in 0..spec.kw {
                    let jj = (oj * spec.sw + kj) as isize - pw;
                    if jj < 0 || jj >= input.w as isize {
                        continue;
                    }
                    let px = input.cell(ii as usize, jj as usize);
                    let base = (ki * spec.kw + kj) * spec.cin * oc;
                    for (ci, &v) in px.iter().enumerate() {
                        let row = &kernel[base + ci * oc..base + (ci + 1) * oc];
                        for (a, &wv) in acc.iter_mut().zip(row) {
                            *a += v * wv;
                        }
                    }
                }
            }
            out.cell_mut(oi, oj).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

pub fn relu_inplace(t: &mut Tensor3) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

pub fn max_pool(input: &Tensor3, spec: &PoolSpec) -> Result<Tensor3> {
    let (oh, ow, c) = LayerSpec::MaxPool(*spec).output_dims(input.dims())?;
    let mut out = Tensor3::filled(oh, ow, c, f32::NEG_INFINITY);
    for oi in 0..oh {
        for oj in 0..ow {
            for ki in 0..spec.k {
                for kj in 0..spec.k {
                    let src = input.cell(oi * spec.s + ki, oj * spec.s + kj);
                    for (o, &v) in out.cell_mut(oi, oj).iter_mut().zip(src) {
                        if v > *o {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Linear projection of non-overlapping `ph x pw` patches into tokens.
pub fn patch_embed(
    image: &Tensor3,
    spec: &PatchEmbedSpec,
    kernel: &[f32],
    bias: &[f32],
) -> Result<TokenGrid> {
    LayerSpec::PatchEmbed(*spec).output_dims(image.dims())?;
    let conv = ConvSpec {
        kh: spec.ph,
        kw: spec.pw,
        sh: spec.ph,
        sw: spec.pw,
        pad: Padding::Valid,
        cin: spec.cin,
        cout: spec.d,
        relu: false,
    };
    conv2d(image, &conv, kernel, bias)
}

/// Parameters of one attention layer, each projection stored `[in][out]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a [f32],
    pub bq: &'a [f32],
    pub wk: &'a [f32],
    pub bk: &'a [f32],
    pub wv: &'a [f32],
    pub bv: &'a [f32],
    pub wo: &'a [f32],
    pub bo: &'a [f32],
}

/// Multi-head self-attention restricted to `gh x gw` token sub-groups, with a
/// residual connection: `out = x + Wo · attn(x)`.
pub fn local_attention(tokens: &TokenGrid, spec: &AttentionSpec, wts: &AttentionWeights<'_>) -> Result<TokenGrid> {
    LayerSpec::LocalAttention(*spec).validate()?;
    LayerSpec::LocalAttention(*spec).output_dims(tokens.dims())?;
    let d = spec.d;
    for (name, block, len) in [
        ("wq", wts.wq, d * d),
        ("wk", wts.wk, d * d),
        ("wv", wts.wv, d * d),
        ("wo", wts.wo, d * d),
        ("bq", wts.bq, d),
        ("bk", wts.bk, d),
        ("bv", wts.bv, d),
        ("bo", wts.bo, d),
    ] {
        if block.len() != len {
            return Err(Error::WeightBlock {
                name: name.to_string(),
                reason: format!("expected {len} values, got {}", block.len()),
            });
        }
    }
    let heads = spec.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let n = spec.gh * spec.gw;
    let mut out = tokens.clone();

    let mut q = vec![0.0f32; n * d];
    let mut k = vec![0.0f32; n * d];
    let mut v = vec![0.0f32; n * d];
    let mut mixed = vec![0.0f32; n * d];
    let mut scores = vec![0.0f32; n];
    let mut proj = vec![0.0f32; d];
    let mut members = Vec::with_capacity(n);

    for gi in (0..tokens.h).step_by(spec.gh) {
        for gj in (0..tokens.w).step_by(spec.gw) {
            members.clear();
            for i in gi..gi + spec.gh {
                for j in gj..gj + spec.gw {
                    members.push((i, j));
                }
            }
            for (t, &(i, j)) in members.iter().enumerate() {
                let x = tokens.cell(i, j);
                linear(x, wts.wq, wts.bq, &mut q[t * d..(t + 1) * d]);
                linear(x, wts.wk, wts.bk, &mut k[t * d..(t + 1) * d]);
                linear(x, wts.wv, wts.bv, &mut v[t * d..(t + 1) * d]);
            }
            for hd in 0..heads {
                let off = hd * dh;
                for t in 0..n {
                    let qt = &q[t * d + off..t * d + off + dh];
                    let mut max = f32::NEG_INFINITY;
                    for (u, s) in scores.iter_mut().enumerate() {
                        let ku = &k[u * d + off..u * d + off + dh];
                        let mut dot = 0.0f32;
                        for (a, b) in qt.iter().zip(ku) {
                            dot += a * b;
                        }
                        *s = dot * scale;
                        if *s > max {
                            max = *s;
                        }
                    }
                    let mut total = 0.0f32;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let dst = &mut mixed[t * d + off..t * d + off + dh];
                    dst.fill(0.0);
                    for (u, &s) in scores.iter().enumerate() {
                        let weight = s / total;
                        let vu = &v[u * d + off..u * d + off + dh];
                        for (o, &vv) in dst.iter_mut().zip(vu) {
                            *o += weight * vv;
                        }
                    }
                }
            }
            for (t, &(i, j)) in members.iter().enumerate() {
                linear(&mixed[t * d..(t + 1) * d], wts.wo, wts.bo, &mut proj);
                for (o, &p) in out.cell_mut(i, j).iter_mut().zip(&proj) {
                    *o += p;
                }
            }
        }
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-token layer normalisation followed by `gain * x + bias`.
pub fn layer_norm(tokens: &TokenGrid, gain: &[f32], bias: &[f32]) -> Result<TokenGrid> {
    let d = tokens.c;
    check_len("gain", d, gain.len())?;
    check_len("bias", d, bias.len())?;
    let mut out = tokens.clone();
    for cell in out.data.chunks_exact_mut(d) {
        let mut mean = 0.0f32;
        for &v in cell.iter() {
            mean += v;
        }
        mean /= d as f32;
        let mut var = 0.0f32;
        for &v in cell.iter() {
            var += (v - mean) * (v - mean);
        }
        var /= d as f32;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, &g), &b) in cell.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Per-token residual MLP: `x + W2 · relu(W1 · x + b1) + b2`.
pub fn mlp(tokens: &TokenGrid, hidden: usize, w1: &[f32], b1: &[f32], w2: &[f32], b2: &[f32]) -> Result<TokenGrid> {
    let d = tokens.c;
    check_len("w1", d * hidden, w1.len())?;
    check_len("b1", hidden, b1.len())?;
    check_len("w2", hidden * d, w2.len())?;
    check_len("b2", d, b2.len())?;
    let mut out = tokens.clone();
    let mut hbuf = vec![0.0f32; hidden];
    let mut obuf = vec![0.0f32; d];
    for cell in out.data.chunks_exact_mut(d) {
        linear(cell, w1, b1, &mut hbuf);
        for v in hbuf.iter_mut() {
            *v = v.max(0.0);
        }
        linear(&hbuf, w2, b2, &mut obuf);
        for (o, &p) in cell.iter_mut().zip(&obuf) {
            *o += p;
        }
    }
    Ok(out)
}

/// Spatial mean over cells, skipping cells flagged in `excluded` when given.
/// Returns a zero vector when every cell is excluded.
pub fn spatial_mean(features: &Tensor3, excluded: Option<&[bool]>) -> Vec<f32> {
    let c = features.c;
    let mut sum = vec![0.0f32; c];
    let mut count = 0usize;
    for (idx, cell) in features.data.chunks_exact(c).enumerate() {
        if excluded.is_some_and(|ex| ex[idx]) {
            continue;
        }
        for (s, &v) in sum.iter_mut().zip(cell) {
            *s += v;
        }
        count += 1;
    }
    if count > 0 {
        let inv = count as f32;
        for s in sum.iter_mut() {
            *s /= inv;
        }
    }
    sum
}

/// Global average pooling plus a linear head. `weight` is `[d][n_classes]`.
pub fn pooled_linear_head(
    features: &Tensor3,
    weight: &[f32],
    bias: &[f32],
    excluded: Option<&[bool]>,
) -> Result<Vec<f32>> {
    let n_classes = bias.len();
    check_len("head weight", features.c * n_classes, weight.len())?;
    if let Some(ex) = excluded {
        check_len("excluded cells", features.h * features.w, ex.len())?;
    }
    let pooled = spatial_mean(features, excluded);
    let mut scores = vec![0.0f32; n_classes];
    linear(&pooled, weight, bias, &mut scores);
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn conv(kh: usize, kw: usize, s: usize, cin: usize, cout: usize) -> ConvSpec {
        ConvSpec {
            kh,
            kw,
            sh: s,
            sw: s,
            pad: Padding::Valid,
            cin,
            cout,
            relu: false,
        }
    }

    // straight nested-loop convolution used as a reference
    fn reference_conv(x: &Tensor3, spec: &ConvSpec, kernel: &[f32]) -> Tensor3 {
        let oh = (x.h() - spec.kh) / spec.sh + 1;
        let ow = (x.w() - spec.kw) / spec.sw + 1;
        Tensor3::from_fn(oh, ow, spec.cout, |i, j, o| {
            let mut acc = 0.0f64;
            for a in 0..spec.kh {
                for b in 0..spec.kw {
                    for c in 0..spec.cin {
                        let w = kernel[((a * spec.kw + b) * spec.cin + c) * spec.cout + o];
                        acc += f64::from(w) * f64::from(x.get(i * spec.sh + a, j * spec.sw + b, c));
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor3::new(5, 7, 3, rand_vec(&mut rng, 105)).unwrap();
        let spec = conv(1, 1, 1, 3, 3);
        let mut kernel = vec![0.0; 9];
        for c in 0..3 {
            kernel[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &spec, &kernel, &[0.0; 3]).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn constant_field_conv() {
        let x = Tensor3::filled(12, 12, 1, 1.0);
        let y = conv2d(&x, &conv(3, 3, 1, 1, 1), &[1.0; 9], &[0.0]).unwrap();
        assert_eq!(y.dims(), (10, 10, 1));
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn center_impulse_matches_reference() {
        let mut x = Tensor3::zeros(5, 5, 1);
        x.set(2, 2, 0, 1.0);
        let spec = conv(3, 3, 1, 1, 1);
        let y = conv2d(&x, &spec, &[1.0; 9], &[0.0]).unwrap();
        let r = reference_conv(&x, &spec, &[1.0; 9]);
        assert!(y.bit_eq(&r));
        // every 3x3 window of the 5x5 input contains the center
        assert_eq!(y.dims(), (3, 3, 1));
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn strided_conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor3::new(9, 11, 2, rand_vec(&mut rng, 198)).unwrap();
        let spec = conv(3, 2, 2, 2, 3);
        let kernel = rand_vec(&mut rng, 3 * 2 * 2 * 3);
        let y = conv2d(&x, &spec, &kernel, &[0.0; 3]).unwrap();
        let r = reference_conv(&x, &spec, &kernel);
        assert_eq!(y.dims(), r.dims());
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_names_offending_axis() {
        let x = Tensor3::zeros(4, 4, 2);
        let err = conv2d(&x, &conv(3, 3, 1, 3, 1), &[0.0; 27], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "channels", .. }));
        let err = conv2d(&Tensor3::zeros(2, 9, 1), &conv(3, 3, 1, 1, 1), &[0.0; 9], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "height", .. }));
    }

    #[test]
    fn same_padding_keeps_size() {
        let x = Tensor3::filled(6, 6, 1, 1.0);
        let spec = ConvSpec {
            pad: Padding::Same,
            ..conv(3, 3, 1, 1, 1)
        };
        let y = conv2d(&x, &spec, &[1.0; 9], &[0.0]).unwrap();
        assert_eq!(y.dims(), (6, 6, 1));
        assert_eq!(y.get(0, 0, 0), 4.0);
        assert_eq!(y.get(2, 3, 0), 9.0);
    }

    #[test]
    fn patch_embed_dims() {
        let spec = PatchEmbedSpec {
            ph: 16,
            pw: 16,
            cin: 3,
            d: 4,
        };
        let kernel = vec![0.01; 16 * 16 * 3 * 4];
        let t = patch_embed(&Tensor3::zeros(224, 224, 3), &spec, &kernel, &[0.0; 4]).unwrap();
        assert_eq!(t.dims(), (14, 14, 4));
        assert!(t.data().iter().all(|&v| v == 0.0));
        let t = patch_embed(&Tensor3::zeros(16, 16, 3), &spec, &kernel, &[0.0; 4]).unwrap();
        assert_eq!(t.dims(), (1, 1, 4));
        let err = patch_embed(&Tensor3::zeros(20, 16, 3), &spec, &kernel, &[0.0; 4]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    struct OwnedAttention {
        blocks: Vec<Vec<f32>>,
    }

    impl OwnedAttention {
        fn random(d: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks = (0..8)
                .map(|i| if i % 2 == 0 { rand_vec(&mut rng, d * d) } else { rand_vec(&mut rng, d) })
                .collect();
            OwnedAttention { blocks }
        }

        fn view(&self) -> AttentionWeights<'_> {
            let b = &self.blocks;
            AttentionWeights {
                wq: &b[0],
                bq: &b[1],
                wk: &b[2],
                bk: &b[3],
                wv: &b[4],
                bv: &b[5],
                wo: &b[6],
                bo: &b[7],
            }
        }
    }

    /// Output cells whose bits differ after perturbing token `(pi, pj)`.
    fn changed_cells(spec: &AttentionSpec, th: usize, tw: usize, pi: usize, pj: usize) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64((pi * 31 + pj) as u64);
        let x = Tensor3::new(th, tw, spec.d, rand_vec(&mut rng, th * tw * spec.d)).unwrap();
        let w = OwnedAttention::random(spec.d, 5);
        let base = local_attention(&x, spec, &w.view()).unwrap();
        let mut y = x.clone();
        for v in y.cell_mut(pi, pj) {
            *v += 0.5;
        }
        let pert = local_attention(&y, spec, &w.view()).unwrap();
        let mut changed = Vec::new();
        for i in 0..th {
            for j in 0..tw {
                if base.cell(i, j) != pert.cell(i, j) {
                    changed.push((i, j));
                }
            }
        }
        changed
    }

    #[test]
    fn column_groups_confine_perturbation() {
        let spec = AttentionSpec {
            gh: 3,
            gw: 1,
            heads: 2,
            d: 4,
        };
        for pi in 0..3 {
            for pj in 0..3 {
                let changed = changed_cells(&spec, 3, 3, pi, pj);
                let expect: Vec<_> = (0..3).map(|i| (i, pj)).collect();
                assert_eq!(changed, expect);
            }
        }
    }

    #[test]
    fn singleton_groups_are_per_token() {
        let spec = AttentionSpec {
            gh: 1,
            gw: 1,
            heads: 1,
            d: 4,
        };
        assert_eq!(changed_cells(&spec, 3, 4, 1, 2), vec![(1, 2)]);
    }

    #[test]
    fn single_group_is_global() {
        let spec = AttentionSpec {
            gh: 3,
            gw: 3,
            heads: 2,
            d: 4,
        };
        assert_eq!(changed_cells(&spec, 3, 3, 0, 0).len(), 9);
    }

    #[test]
    fn exhaustive_locality_up_to_6x6() {
        for (th, tw, gh, gw) in [(6, 6, 2, 2), (6, 6, 3, 2), (6, 6, 6, 1), (4, 6, 2, 3), (6, 6, 1, 6)] {
            let spec = AttentionSpec { gh, gw, heads: 2, d: 4 };
            for pi in 0..th {
                for pj in 0..tw {
                    for (i, j) in changed_cells(&spec, th, tw, pi, pj) {
                        assert_eq!(i / gh, pi / gh);
                        assert_eq!(j / gw, pj / gw);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_rejects_bad_config() {
        let spec = AttentionSpec {
            gh: 1,
            gw: 1,
            heads: 3,
            d: 4,
        };
        let w = OwnedAttention::random(4, 1);
        let err = local_attention(&Tensor3::zeros(2, 2, 4), &spec, &w.view()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let spec = AttentionSpec {
            gh: 4,
            gw: 1,
            heads: 2,
            d: 4,
        };
        assert!(local_attention(&Tensor3::zeros(6, 2, 4), &spec, &w.view()).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let t = Tensor3::new(1, 1, 2, vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&t, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        let expect = 1.0 / (1.0f32 + 1e-5).sqrt();
        assert!((y.get(0, 0, 0) - expect).abs() < 1e-7);
        assert!((y.get(0, 0, 1) + expect).abs() < 1e-7);

        let t = Tensor3::filled(2, 2, 3, 4.2);
        let y = layer_norm(&t, &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor3::new(2, 3, 5, rand_vec(&mut rng, 30)).unwrap();
        let y = layer_norm(&t, &[0.0; 5], &[0.5, 1.0, 1.5, 2.0, 2.5]).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(y.cell(i, j), &[0.5, 1.0, 1.5, 2.0, 2.5]);
            }
        }
        assert!(layer_norm(&t, &[1.0; 4], &[0.0; 5]).is_err());
    }

    #[test]
    fn layer_norm_standardises() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor3::new(3, 3, 16, (0..144).map(|_| rng.gen_range(-3.0..5.0)).collect()).unwrap();
        let y = layer_norm(&t, &[1.0; 16], &[0.0; 16]).unwrap();
        for cell in y.data().chunks(16) {
            let mean: f64 = cell.iter().map(|&v| f64::from(v)).sum::<f64>() / 16.0;
            let var: f64 = cell.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn head_zero_input_and_tie_break() {
        let f = Tensor3::zeros(2, 2, 3);
        let scores = pooled_linear_head(&f, &[0.3; 12], &[0.0; 4], None).unwrap();
        assert_eq!(scores, vec![0.0; 4]);
        assert_eq!(crate::util::argmax(&scores), 0);
    }

    #[test]
    fn head_one_hot_is_spatial_mean() {
        let mut f = Tensor3::zeros(2, 2, 2);
        f.set(1, 0, 1, 4.0);
        let scores = pooled_linear_head(&f, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], None).unwrap();
        assert_eq!(scores, vec![0.0, 1.0]);
    }

    #[test]
    fn head_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = Tensor3::new(2, 2, 3, rand_vec(&mut rng, 12)).unwrap();
        let w = rand_vec(&mut rng, 3 * 5);
        let b = rand_vec(&mut rng, 5);
        let got = pooled_linear_head(&f, &w, &b, None).unwrap();
        for k in 0..5 {
            let mut s = f64::from(b[k]);
            for c in 0..3 {
                let mut mean = 0.0f64;
                for i in 0..2 {
                    for j in 0..2 {
                        mean += f64::from(f.get(i, j, c));
                    }
                }
                s += mean / 4.0 * f64::from(w[c * 5 + k]);
            }
            assert!((f64::from(got[k]) - s).abs() < 1e-6);
        }
    }

    #[test]
    fn head_excludes_masked_cells() {
        let f = Tensor3::new(1, 2, 1, vec![2.0, 100.0]).unwrap();
        let s = pooled_linear_head(&f, &[1.0], &[0.0], Some(&[false, true])).unwrap();
        assert_eq!(s, vec![2.0]);
        let s = pooled_linear_head(&f, &[1.0], &[0.5], Some(&[true, true])).unwrap();
        assert_eq!(s, vec![0.5]);
    }

    /// `||f(ax+by) - (a f(x) + b f(y))|| / ||a f(x) + b f(y)||`
    fn relative_gap(combo: &Tensor3, fx: &Tensor3, fy: &Tensor3, a: f32, b: f32) -> f64 {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for ((c, p), q) in combo.data().iter().zip(fx.data()).zip(fy.data()) {
            let want = f64::from(a) * f64::from(*p) + f64::from(b) * f64::from(*q);
            num += (f64::from(*c) - want).powi(2);
            den += want * want;
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    proptest! {
        #[test]
        fn conv_and_embed_are_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor3::new(8, 8, 2, rand_vec(&mut rng, 128)).unwrap();
            let y = Tensor3::new(8, 8, 2, rand_vec(&mut rng, 128)).unwrap();
            let combo = Tensor3::new(8, 8, 2, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let spec = conv(3, 3, 2, 2, 3);
            let kernel = rand_vec(&mut rng, 3 * 3 * 2 * 3);
            let fx = conv2d(&x, &spec, &kernel, &[0.0; 3]).unwrap();
            let fy = conv2d(&y, &spec, &kernel, &[0.0; 3]).unwrap();
            let fc = conv2d(&combo, &spec, &kernel, &[0.0; 3]).unwrap();
            prop_assert!(relative_gap(&fc, &fx, &fy, a, b) < 1e-5);
            let pe = PatchEmbedSpec { ph: 4, pw: 4, cin: 2, d: 3 };
            let k2 = rand_vec(&mut rng, 4 * 4 * 2 * 3);
            let ex = patch_embed(&x, &pe, &k2, &[0.0; 3]).unwrap();
            let ey = patch_embed(&y, &pe, &k2, &[0.0; 3]).unwrap();
            let ec = patch_embed(&combo, &pe, &k2, &[0.0; 3]).unwrap();
            prop_assert!(relative_gap(&ec, &ex, &ey, a, b) < 1e-5);
        }

        #[test]
        fn kernels_are_deterministic(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor3::new(4, 4, 4, rand_vec(&mut rng, 64)).unwrap();
            let w = OwnedAttention::random(4, seed);
            let spec = AttentionSpec { gh: 2, gw: 2, heads: 2, d: 4 };
            let a = local_attention(&x, &spec, &w.view()).unwrap();
            let b = local_attention(&x, &spec, &w.view()).unwrap();
            prop_assert!(a.bit_eq(&b));
        }
    }
}
