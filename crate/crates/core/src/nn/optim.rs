//! Adaptive-moment optimizer, warmup–cosine schedule and softmax.

use crate::error::{Error, Result};
use crate::nn::layer::Layer;
use crate::nn::tensor::Tensor;

pub const ADAM_BETAS: (f32, f32) = (0.9, 0.999);
pub const ADAM_EPS: f32 = 1e-8;

/// First/second moment accumulators aligned with a layer slice.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<Tensor>>,
    pub second: Vec<Vec<Tensor>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(layers: &[Layer]) -> Self {
        let zeros = crate::nn::graph::zero_param_grads(layers);
        OptimizerState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step. Validates every shape and gradient before
/// touching parameters or moments.
pub fn adam_update(
    layers: &mut [Layer],
    grads: &[Vec<Tensor>],
    state: &mut OptimizerState,
    rate: f32,
    betas: (f32, f32),
    eps: f32,
) -> Result<()> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::out_of_range("learning rate", rate, "[0, inf)"));
    }
    if grads.len() != layers.len()
        || state.first.len() != layers.len()
        || state.second.len() != layers.len()
    {
        return Err(Error::shape(
            "adam",
            format!(
                "{} layers, {} gradient groups, {} moment groups",
                layers.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for (l, layer) in layers.iter().enumerate() {
        if grads[l].len() != layer.params.len()
            || state.first[l].len() != layer.params.len()
            || state.second[l].len() != layer.params.len()
        {
            return Err(Error::shape(&layer.name, "gradient/moment count mismatch"));
        }
        for (i, p) in layer.params.iter().enumerate() {
            for t in [&grads[l][i], &state.first[l][i], &state.second[l][i]] {
                if t.shape() != p.shape() {
                    return Err(Error::shape(
                        &layer.name,
                        format!("parameter {i}: {:?} vs {:?}", t.shape(), p.shape()),
                    ));
                }
            }
            grads[l][i].check_finite(&format!("gradient of {}", layer.name))?;
        }
    }

    state.step += 1;
    let (b1, b2) = betas;
    let t = state.step as i32;
    let c1 = 1.0 - (b1 as f64).powi(t);
    let c2 = 1.0 - (b2 as f64).powi(t);
    for (l, layer) in layers.iter_mut().enumerate() {
        for (i, p) in layer.params.iter_mut().enumerate() {
            let g = grads[l][i].data();
            let m = state.first[l][i].data_mut();
            let v = state.second[l][i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv as f64 / c1;
                let v_hat = *vv as f64 / c2;
                *pv -= (rate as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_rate: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_rate: f32, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(base_rate > 0.0 && base_rate.is_finite()) {
            return Err(Error::out_of_range("base rate", base_rate, "(0, inf)"));
        }
        if total_steps <= warmup_steps {
            return Err(Error::out_of_range(
                "total steps",
                total_steps,
                format!("({warmup_steps}, inf)"),
            ));
        }
        Ok(LrSchedule {
            base_rate,
            warmup_steps,
            total_steps,
        })
    }
}

pub fn lr_at(schedule: &LrSchedule, step: usize) -> Result<f32> {
    let LrSchedule {
        base_rate,
        warmup_steps,
        total_steps,
    } = *schedule;
    if step > total_steps {
        return Err(Error::out_of_range(
            "schedule step",
            step,
            format!("[0, {total_steps}]"),
        ));
    }
    let base = base_rate as f64;
    let rate = if step < warmup_steps {
        base * step as f64 / warmup_steps as f64
    } else {
        let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    };
    Ok(rate.clamp(0.0, base) as f32)
}

/// Stable softmax of one row at the given temperature.
pub fn softmax_row(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Softmax over the last axis.
pub fn softmax(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::out_of_range("temperature", temperature, "(0, inf)"));
    }
    let width = logits.last_dim();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(width) {
        let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        out.extend(softmax_row(&row, temperature as f64).into_iter().map(|p| p as f32));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::LayerKind;

    fn scalar_layer(values: &[f32]) -> Vec<Layer> {
        vec![Layer::new(
            "p",
            LayerKind::ChannelNorm {
                channels: values.len(),
                eps: 1e-5,
            },
            vec![
                Tensor::from_slice(&[values.len()], values).unwrap(),
                Tensor::zeros(&[values.len()]),
            ],
        )
        .unwrap()]
    }

    fn grads_for(values: &[f32]) -> Vec<Vec<Tensor>> {
        vec![vec![
            Tensor::from_slice(&[values.len()], values).unwrap(),
            Tensor::zeros(&[values.len()]),
        ]]
    }

    #[test]
    fn zero_rate_moves_moments_only() {
        let mut layers = scalar_layer(&[0.5]);
        let mut state = OptimizerState::new(&layers);
        adam_update(&mut layers, &grads_for(&[2.0]), &mut state, 0.0, ADAM_BETAS, ADAM_EPS).unwrap();
        assert_eq!(layers[0].params[0].data(), &[0.5]);
        assert!(state.first[0][0].data()[0] != 0.0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_reference() {
        let mut layers = scalar_layer(&[0.0]);
        let mut state = OptimizerState::new(&layers);
        adam_update(&mut layers, &grads_for(&[1.0]), &mut state, 0.1, ADAM_BETAS, ADAM_EPS).unwrap();
        assert!((layers[0].params[0].data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn identical_params_update_identically() {
        let mut layers = scalar_layer(&[0.3, 0.3]);
        let mut state = OptimizerState::new(&layers);
        for _ in 0..5 {
            adam_update(&mut layers, &grads_for(&[0.7, 0.7]), &mut state, 0.01, ADAM_BETAS, ADAM_EPS)
                .unwrap();
        }
        let p = layers[0].params[0].data();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn non_finite_gradient_leaves_everything_untouched() {
        let mut layers = scalar_layer(&[1.0]);
        let mut state = OptimizerState::new(&layers);
        let before = (layers.clone(), state.clone());
        let err = adam_update(&mut layers, &grads_for(&[f32::NAN]), &mut state, 0.1, ADAM_BETAS, ADAM_EPS);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!((layers, state), before);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(3e-4, 10, 100).unwrap();
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 10).unwrap(), 3e-4);
        assert!(lr_at(&s, 100).unwrap().abs() < 1e-12);
        assert!(lr_at(&s, 101).is_err());
        assert!(LrSchedule::new(1.0, 5, 5).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_warmup_boundary() {
        let s = LrSchedule::new(1.0, 50, 1000).unwrap();
        let before = lr_at(&s, 49).unwrap();
        let at = lr_at(&s, 50).unwrap();
        let after = lr_at(&s, 51).unwrap();
        assert!((at - 1.0).abs() < 1e-7);
        assert!((at - before).abs() < 0.021 && (at - after).abs() < 1e-4);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::from_slice(&[2], &[0.0, 0.0]).unwrap(), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&Tensor::from_slice(&[2], &[1000.0, 0.0]).unwrap(), 1.0).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }
}
