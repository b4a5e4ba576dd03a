//! Central finite-difference checks of recorded gradients.

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::layer::{Layer, LayerKind, LEAKY_SLOPE, NORM_EPS};
use crate::nn::resize::ResizeKind;
use crate::nn::tensor::Tensor;
use crate::rng::{Stream, StreamKey};

pub const FD_STEP: f32 = 1e-3;
/// The tape-op check is linear in every checked tensor, so a wider step
/// carries no truncation error and less rounding noise.
const LINEAR_FD_STEP: f32 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest norm-wise relative error over all checked tensors.
    pub max_rel_error: f64,
}

type Build = dyn Fn(&mut Graph, Option<Var>) -> Result<Var>;

fn normal_tensor(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Push values away from the activation kink so finite differences do not
/// straddle it.
fn away_from_zero(t: &mut Tensor) {
    for v in t.data_mut() {
        if v.abs() < 0.1 {
            *v = if *v < 0.0 { *v - 0.2 } else { *v + 0.2 };
        }
    }
}

fn projected_loss(layers: &[Layer], input: Option<&Tensor>, build: &Build, weights: &Tensor) -> Result<f64> {
    let mut g = Graph::inference(layers);
    let x = input.map(|t| g.input(t.clone()));
    let y = build(&mut g, x)?;
    Ok(g.value(y)?
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum())
}

fn rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a as f64 - n).powi(2);
        na += (a as f64).powi(2);
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-6)
}

fn run_check(
    name: &str,
    mut layers: Vec<Layer>,
    mut input: Option<Tensor>,
    build: &Build,
    step: f32,
    rng: &mut Stream,
) -> Result<GradCheckReport> {
    let (weights, analytic_params, analytic_input) = {
        let mut g = Graph::new(&layers);
        let x = input.as_ref().map(|t| g.input(t.clone()));
        let y = build(&mut g, x)?;
        let weights = normal_tensor(g.value(y)?.shape(), rng);
        let grads = g.backward(y, &weights)?;
        let dx = match x {
            Some(x) => Some(grads.input(x)?.clone()),
            None => None,
        };
        (weights, grads.params, dx)
    };

    let mut worst = 0.0f64;
    let h = step;
    for l in 0..layers.len() {
        for p in 0..layers[l].params.len() {
            let n = layers[l].params[p].len();
            let mut numeric = vec![0.0f64; n];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let orig = layers[l].params[p].data()[j];
                let (hi, lo) = (orig + h, orig - h);
                layers[l].params[p].data_mut()[j] = hi;
                let up = projected_loss(&layers, input.as_ref(), build, &weights)?;
                layers[l].params[p].data_mut()[j] = lo;
                let down = projected_loss(&layers, input.as_ref(), build, &weights)?;
                layers[l].params[p].data_mut()[j] = orig;
                *slot = (up - down) / (hi as f64 - lo as f64);
            }
            worst = worst.max(rel_error(analytic_params[l][p].data(), &numeric));
        }
    }
    if let Some(dx) = analytic_input {
        let n = dx.len();
        let mut numeric = vec![0.0f64; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let t = input.as_mut().unwrap();
            let orig = t.data()[j];
            let (hi, lo) = (orig + h, orig - h);
            t.data_mut()[j] = hi;
            let up = projected_loss(&layers, input.as_ref(), build, &weights)?;
            input.as_mut().unwrap().data_mut()[j] = lo;
            let down = projected_loss(&layers, input.as_ref(), build, &weights)?;
            input.as_mut().unwrap().data_mut()[j] = orig;
            *slot = (up - down) / (hi as f64 - lo as f64);
        }
        worst = worst.max(rel_error(dx.data(), &numeric));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst,
    })
}

fn with_random_bias(mut layer: Layer, rng: &mut Stream) -> Layer {
    for p in layer.params.iter_mut().skip(1) {
        *p = normal_tensor(p.shape(), rng);
        p.scale(0.3);
    }
    layer
}

/// Gradient check of one layer kind on small random tensors.
pub fn check_layer_kind(kind: &LayerKind, seed: u64) -> Result<GradCheckReport> {
    let mut rng = StreamKey::root(seed).derive_str(kind.name()).stream();
    let layer = with_random_bias(Layer::init("probe", kind.clone(), 1.0, &mut rng), &mut rng);
    let input = match *kind {
        LayerKind::Dense { inputs, .. } => Some(normal_tensor(&[3, inputs], &mut rng)),
        LayerKind::Conv3x3 { inputs, .. } | LayerKind::Conv1x1 { inputs, .. } => {
            Some(normal_tensor(&[2, 4, 3, inputs], &mut rng))
        }
        LayerKind::ChannelNorm { channels, .. } => Some(normal_tensor(&[2, 3, 3, channels], &mut rng)),
        LayerKind::LeakyRelu { .. } => {
            let mut t = normal_tensor(&[2, 3, 3, 2], &mut rng);
            away_from_zero(&mut t);
            Some(t)
        }
        LayerKind::Embedding { .. } => None,
    };
    let rows = match *kind {
        LayerKind::Embedding { rows, .. } => rows,
        _ => 0,
    };
    let ids: Vec<usize> = (0..5).map(|_| rng.below(rows.max(1))).collect();
    let build = move |g: &mut Graph, x: Option<Var>| match x {
        Some(x) => g.layer(0, x),
        None => g.embed(0, &ids),
    };
    run_check(kind.name(), vec![layer], input, &build, FD_STEP, &mut rng)
}

/// conv3x3 → channel-norm → leaky-relu on a 4×4×2 input. Draws are repeated
/// until no pre-activation lies within reach of the kink.
pub fn check_conv_norm_act(seed: u64) -> Result<GradCheckReport> {
    let key = StreamKey::root(seed).derive_str("conv-norm-act");
    let build = |g: &mut Graph, x: Option<Var>| g.chain(&[0, 1, 2], x.unwrap());
    for attempt in 0.. {
        let mut rng = key.derive(attempt).stream();
        let layers = vec![
            with_random_bias(
                Layer::init("conv", LayerKind::Conv3x3 { inputs: 2, outputs: 3 }, 1.0, &mut rng),
                &mut rng,
            ),
            with_random_bias(
                Layer::init(
                    "norm",
                    LayerKind::ChannelNorm {
                        channels: 3,
                        eps: NORM_EPS,
                    },
                    1.0,
                    &mut rng,
                ),
                &mut rng,
            ),
            Layer::new("act", LayerKind::LeakyRelu { slope: LEAKY_SLOPE }, vec![])?,
        ];
        let input = normal_tensor(&[1, 4, 4, 2], &mut rng);
        let mut g = Graph::inference(&layers);
        let x = g.input(input.clone());
        let pre = g.chain(&[0, 1], x)?;
        if g.value(pre)?.data().iter().any(|v| v.abs() < 0.05) {
            continue;
        }
        return run_check("conv3x3+channel-norm+leaky-relu", layers, Some(input), &build, FD_STEP, &mut rng);
    }
    unreachable!()
}

/// Exercises resize, broadcast-add, reshape and concat on the tape.
pub fn check_graph_ops(seed: u64) -> Result<GradCheckReport> {
    let mut rng = StreamKey::root(seed).derive_str("graph-ops").stream();
    let layers = vec![
        Layer::init("emb", LayerKind::Embedding { rows: 4, dim: 3 }, 1.0, &mut rng),
        with_random_bias(
            Layer::init("proj", LayerKind::Conv1x1 { inputs: 3, outputs: 3 }, 1.0, &mut rng),
            &mut rng,
        ),
        with_random_bias(
            Layer::init(
                "fc",
                LayerKind::Dense {
                    inputs: 2 * 2 * 3 + 3,
                    outputs: 2,
                },
                1.0,
                &mut rng,
            ),
            &mut rng,
        ),
    ];
    let input = normal_tensor(&[2, 4, 4, 3], &mut rng);
    let build = |g: &mut Graph, x: Option<Var>| {
        let x = x.unwrap();
        let e = g.embed(0, &[1, 3])?;
        let h = g.broadcast_add(x, e)?;
        let h = g.layer(1, h)?;
        let up = g.resize(h, 6, 5, ResizeKind::Bilinear)?;
        let down = g.resize(up, 2, 2, ResizeKind::Area)?;
        let flat = g.reshape(down, &[2, 12])?;
        let cat = g.concat(flat, e)?;
        g.layer(2, cat)
    };
    run_check("graph-ops", layers, Some(input), &build, LINEAR_FD_STEP, &mut rng)
}

/// Every layer kind plus the composite and tape-op checks for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let kinds = [
        LayerKind::Dense {
            inputs: 4,
            outputs: 3,
        },
        LayerKind::Conv3x3 {
            inputs: 2,
            outputs: 3,
        },
        LayerKind::Conv1x1 {
            inputs: 3,
            outputs: 2,
        },
        LayerKind::ChannelNorm {
            channels: 4,
            eps: NORM_EPS,
        },
        LayerKind::LeakyRelu { slope: LEAKY_SLOPE },
        LayerKind::Embedding { rows: 4, dim: 3 },
    ];
    let mut out = kinds
        .iter()
        .map(|k| check_layer_kind(k, seed))
        .collect::<Result<Vec<_>>>()?;
    out.push(check_conv_norm_act(seed)?);
    out.push(check_graph_ops(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_a_few_seeds() {
        for seed in 0..3 {
            for r in gradient_suite(seed).unwrap() {
                assert!(r.max_rel_error <= 1e-3, "{} seed {seed}: {}", r.name, r.max_rel_error);
            }
        }
    }
}
