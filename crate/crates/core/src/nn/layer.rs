//! The six layer kinds and their forward/backward kernels.
//!
//! Spatial tensors are `[N, H, W, C]`; dense tensors are `[N, D]`. Convolutions
//! use stride 1 with zero padding that preserves the spatial extent, lowered
//! to GEMM through an im2col buffer.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::rng::Stream;

pub const NORM_EPS: f32 = 1e-5;
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv3x3 { inputs: usize, outputs: usize },
    Conv1x1 { inputs: usize, outputs: usize },
    ChannelNorm { channels: usize, eps: f32 },
    LeakyRelu { slope: f32 },
    Embedding { rows: usize, dim: usize },
}

impl LayerKind {
    pub fn code(&self) -> u8 {
        match self {
            LayerKind::Dense { .. } => 0,
            LayerKind::Conv3x3 { .. } => 1,
            LayerKind::Conv1x1 { .. } => 2,
            LayerKind::ChannelNorm { .. } => 3,
            LayerKind::LeakyRelu { .. } => 4,
            LayerKind::Embedding { .. } => 5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv3x3 { .. } => "conv3x3",
            LayerKind::Conv1x1 { .. } => "conv1x1",
            LayerKind::ChannelNorm { .. } => "channel-norm",
            LayerKind::LeakyRelu { .. } => "leaky-relu",
            LayerKind::Embedding { .. } => "embedding",
        }
    }

    /// Shapes of the parameter tensors in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } | LayerKind::Conv1x1 { inputs, outputs } => {
                vec![vec![inputs, outputs], vec![outputs]]
            }
            LayerKind::Conv3x3 { inputs, outputs } => {
                vec![vec![3, 3, inputs, outputs], vec![outputs]]
            }
            LayerKind::ChannelNorm { channels, .. } => vec![vec![channels], vec![channels]],
            LayerKind::LeakyRelu { .. } => vec![],
            LayerKind::Embedding { rows, dim } => vec![vec![rows, dim]],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind, params: Vec<Tensor>) -> Result<Self> {
        let name = name.into();
        let shapes = kind.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::shape(
                &name,
                format!("expected {} parameter tensors, got {}", shapes.len(), params.len()),
            ));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(Error::shape(
                    &name,
                    format!("parameter {i} has shape {:?}, expected {s:?}", p.shape()),
                ));
            }
        }
        Ok(Layer { name, kind, params })
    }

    /// He-normal weights scaled by `gain`, zero biases, unit norm gains.
    pub fn init(name: impl Into<String>, kind: LayerKind, gain: f32, rng: &mut Stream) -> Self {
        let params = kind
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| match (&kind, i) {
                (LayerKind::ChannelNorm { .. }, 0) => Tensor::filled(&shape, 1.0),
                (LayerKind::Embedding { .. }, _) => random_tensor(&shape, gain, rng),
                (_, 0) => {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    random_tensor(&shape, gain * (2.0 / fan_in as f32).sqrt(), rng)
                }
                _ => Tensor::zeros(&shape),
            })
            .collect();
        Layer {
            name: name.into(),
            kind,
            params,
        }
    }

    pub fn zero_init(name: impl Into<String>, kind: LayerKind) -> Self {
        let params = kind.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Layer {
            name: name.into(),
            kind,
            params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Embedding rows for `ids` as an `[ids.len(), dim]` tensor.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let LayerKind::Embedding { rows, dim } = self.kind else {
            return Err(Error::shape(&self.name, "lookup on a non-embedding layer"));
        };
        let table = self.params[0].data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape(
                    &self.name,
                    format!("row id {id} outside table of {rows} rows"),
                ));
            }
            out.extend_from_slice(&table[id * dim..(id + 1) * dim]);
        }
        Tensor::new(vec![ids.len(), dim], out)
    }

    /// Check that `input` fits this layer.
    pub fn check_input(&self, input: &Tensor) -> Result<()> {
        let shape = input.shape();
        let fail = |detail: String| Err(Error::shape(&self.name, detail));
        match self.kind {
            LayerKind::Dense { inputs, .. } => {
                if shape.len() != 2 || shape[1] != inputs {
                    return fail(format!("input {shape:?}, expected [N, {inputs}]"));
                }
            }
            LayerKind::Conv3x3 { inputs, .. } | LayerKind::Conv1x1 { inputs, .. } => {
                if shape.len() != 4 || shape[3] != inputs {
                    return fail(format!("input {shape:?}, expected [N, H, W, {inputs}]"));
                }
            }
            LayerKind::ChannelNorm { channels, .. } => {
                if shape.is_empty() || input.last_dim() != channels {
                    return fail(format!("input {shape:?}, last axis must be {channels}"));
                }
            }
            LayerKind::LeakyRelu { .. } => {}
            LayerKind::Embedding { .. } => {
                if shape.len() != 1 {
                    return fail(format!("id input {shape:?}, expected [N]"));
                }
            }
        }
        Ok(())
    }
}

fn random_tensor(shape: &[usize], std: f32, rng: &mut Stream) -> Tensor {
    let normal = Normal::new(0.0f32, std.max(0.0)).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Forward pass without recording; embedding layers read ids encoded as
/// integral f32 values.
pub fn apply_layer(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    layer.check_input(input)?;
    let p = &layer.params;
    match layer.kind {
        LayerKind::Dense { .. } | LayerKind::Conv1x1 { .. } => {
            Ok(pointwise_forward(input, &p[0], &p[1]))
        }
        LayerKind::Conv3x3 { .. } => Ok(conv3x3_forward(input, &p[0], &p[1]).0),
        LayerKind::ChannelNorm { eps, .. } => Ok(channel_norm_forward(input, &p[0], &p[1], eps).0),
        LayerKind::LeakyRelu { slope } => Ok(leaky_relu_forward(input, slope)),
        LayerKind::Embedding { .. } => {
            let ids = input
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::shape(&layer.name, format!("invalid id {v}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            layer.lookup(&ids)
        }
    }
}

/// `C = op(A)·op(B) (+ C)` for row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense / 1×1 convolution over the last axis.
pub(crate) fn pointwise_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / cin;
    let mut out = vec![0.0f32; rows * cout];
    for row in out.chunks_mut(cout) {
        row.copy_from_slice(b.data());
    }
    gemm(rows, cin, cout, x.data(), false, w.data(), false, &mut out, true);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out).expect("shape")
}

/// Returns `(dx, dw, db)`.
pub(crate) fn pointwise_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / cin;
    let mut dx = vec![0.0f32; rows * cin];
    gemm(rows, cout, cin, dy.data(), false, w.data(), true, &mut dx, false);
    let mut dw = vec![0.0f32; cin * cout];
    gemm(cin, rows, cout, x.data(), true, dy.data(), false, &mut dw, false);
    let mut db = vec![0.0f32; cout];
    for row in dy.data().chunks(cout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

fn im2col3x3(x: &Tensor) -> Vec<f32> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let row_len = 9 * c;
    let mut cols = vec![0.0f32; n * h * w * row_len];
    let data = x.data();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * row_len;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (dy * 3 + dx) * c;
                        cols[dst..dst + c].copy_from_slice(&data[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im3x3(cols: &[f32], shape: &[usize]) -> Vec<f32> {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let row_len = 9 * c;
    let mut out = vec![0.0f32; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * row_len;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (dy * 3 + dx) * c;
                        for (o, &g) in out[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the output and the im2col buffer needed for the backward pass.
pub(crate) fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> (Tensor, Vec<f32>) {
    let s = x.shape();
    let (cin, cout) = (w.shape()[2], w.shape()[3]);
    let rows = s[0] * s[1] * s[2];
    let cols = im2col3x3(x);
    let mut out = vec![0.0f32; rows * cout];
    for row in out.chunks_mut(cout) {
        row.copy_from_slice(b.data());
    }
    gemm(rows, 9 * cin, cout, &cols, false, w.data(), false, &mut out, true);
    let y = Tensor::new(vec![s[0], s[1], s[2], cout], out).unwrap();
    (y, cols)
}

pub(crate) fn conv3x3_backward(
    cols: &[f32],
    in_shape: &[usize],
    w: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, cout) = (w.shape()[2], w.shape()[3]);
    let rows = in_shape[0] * in_shape[1] * in_shape[2];
    let k = 9 * cin;
    let mut dcols = vec![0.0f32; rows * k];
    gemm(rows, cout, k, dy.data(), false, w.data(), true, &mut dcols, false);
    let mut dw = vec![0.0f32; k * cout];
    gemm(k, rows, cout, cols, true, dy.data(), false, &mut dw, false);
    let mut db = vec![0.0f32; cout];
    for row in dy.data().chunks(cout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (
        Tensor::new(in_shape.to_vec(), col2im3x3(&dcols, in_shape)).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

/// Per-site normalization over the channel axis. Returns `(y, x_hat, inv_std)`.
pub(crate) fn channel_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f32,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let c = gain.len();
    let sites = x.len() / c;
    let mut y = vec![0.0f32; x.len()];
    let mut x_hat = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; sites];
    for (s, row) in x.data().chunks(c).enumerate() {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[s] = inv;
        for i in 0..c {
            let h = (row[i] - mean) * inv;
            x_hat[s * c + i] = h;
            y[s * c + i] = h * gain.data()[i] + bias.data()[i];
        }
    }
    (Tensor::new(x.shape().to_vec(), y).unwrap(), x_hat, inv_std)
}

pub(crate) fn channel_norm_backward(
    x_hat: &[f32],
    inv_std: &[f32],
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gain.len();
    let mut dx = vec![0.0f32; dy.len()];
    let mut dg = vec![0.0f32; c];
    let mut db = vec![0.0f32; c];
    for (s, g_row) in dy.data().chunks(c).enumerate() {
        let xh = &x_hat[s * c..(s + 1) * c];
        let mut mean_dxh = 0.0f32;
        let mut mean_dxh_xh = 0.0f32;
        for i in 0..c {
            let dxh = g_row[i] * gain.data()[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
            dg[i] += g_row[i] * xh[i];
            db[i] += g_row[i];
        }
        mean_dxh /= c as f32;
        mean_dxh_xh /= c as f32;
        for i in 0..c {
            let dxh = g_row[i] * gain.data()[i];
            dx[s * c + i] = inv_std[s] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    (
        Tensor::new(dy.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dg).unwrap(),
        Tensor::new(vec![c], db).unwrap(),
    )
}

pub(crate) fn leaky_relu_forward(x: &Tensor, slope: f32) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { v * slope })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub(crate) fn leaky_relu_backward(x: &Tensor, dy: &Tensor, slope: f32) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { g * slope })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    #[test]
    fn leaky_relu_definition() {
        let layer = Layer::new("act", LayerKind::LeakyRelu { slope: 0.01 }, vec![]).unwrap();
        let x = Tensor::from_slice(&[2], &[-1.0, 2.0]).unwrap();
        let y = apply_layer(&layer, &x).unwrap();
        assert_eq!(y.data(), &[-0.01, 2.0]);
    }

    #[test]
    fn zero_conv_gives_zero_output() {
        let layer = Layer::zero_init("c", LayerKind::Conv3x3 { inputs: 3, outputs: 5 });
        let mut rng = StreamKey::root(1).stream();
        let x = random_tensor(&[2, 4, 6, 3], 1.0, &mut rng);
        let y = apply_layer(&layer, &x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 6, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense() {
        let w = Tensor::from_slice(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let layer = Layer::new(
            "d",
            LayerKind::Dense {
                inputs: 2,
                outputs: 2,
            },
            vec![w, b],
        )
        .unwrap();
        let y = apply_layer(&layer, &Tensor::from_slice(&[1, 2], &[3.0, -4.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.0, -4.0]);
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let mut rng = StreamKey::root(3).stream();
        let layer = Layer::init("c", LayerKind::Conv3x3 { inputs: 2, outputs: 3 }, 1.0, &mut rng);
        let x = random_tensor(&[1, 4, 5, 2], 1.0, &mut rng);
        let y = apply_layer(&layer, &x).unwrap();
        let w = layer.params[0].data();
        for yy in 0..4 {
            for xx in 0..5 {
                for co in 0..3 {
                    let mut acc = 0.0f32;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let sy = yy as isize + dy as isize - 1;
                            let sx = xx as isize + dx as isize - 1;
                            if sy < 0 || sy >= 4 || sx < 0 || sx >= 5 {
                                continue;
                            }
                            for ci in 0..2 {
                                let xv = x.data()[((sy as usize) * 5 + sx as usize) * 2 + ci];
                                acc += xv * w[((dy * 3 + dx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    let got = y.data()[(yy * 5 + xx) * 3 + co];
                    assert!((got - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn channel_norm_normalizes_each_site() {
        let layer = Layer::init(
            "n",
            LayerKind::ChannelNorm {
                channels: 4,
                eps: NORM_EPS,
            },
            1.0,
            &mut StreamKey::root(0).stream(),
        );
        let x = Tensor::from_slice(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap();
        let y = apply_layer(&layer, &x).unwrap();
        for row in y.data().chunks(4) {
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let layer = Layer::zero_init(
            "head.fc1",
            LayerKind::Dense {
                inputs: 3,
                outputs: 2,
            },
        );
        let err = apply_layer(&layer, &Tensor::zeros(&[1, 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("head.fc1") && msg.contains("[1, 4]"), "{msg}");
    }

    #[test]
    fn embedding_lookup_by_id() {
        let table = Tensor::from_slice(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let layer = Layer::new("e", LayerKind::Embedding { rows: 3, dim: 2 }, vec![table]).unwrap();
        let y = apply_layer(&layer, &Tensor::from_slice(&[2], &[2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(layer.lookup(&[3]).is_err());
    }
}
