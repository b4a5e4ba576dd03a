//! Next-scale autoregressive prior.
//!
//! A convolutional trunk reads the fused prefix `e_{k-1}` (resampled to the
//! resolution of scale `k`), adds class and scale embeddings after a 1×1
//! projection, and emits one categorical distribution per position. All
//! positions of a scale are sampled independently, each from its own random
//! substream.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msvq::{encode_multiscale, fuse_incremental, Codebook, MultiScaleCode, ScaleSchedule, TokenMap};
use crate::nn::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::nn::graph::{accumulate_param_grads, zero_param_grads, Graph, Var};
use crate::nn::layer::{Layer, LayerKind, LEAKY_SLOPE, NORM_EPS};
use crate::nn::resize::ResizeKind;
use crate::nn::optim::{adam_update, lr_at, LrSchedule, OptimizerState, ADAM_BETAS, ADAM_EPS};
use crate::nn::tensor::{FeatureMap, Tensor};
use crate::rng::StreamKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub n_classes: usize,
    pub vocab: usize,
    pub channels: usize,
    pub scales: usize,
    pub width: usize,
    pub blocks: usize,
    /// Largest side the trunk runs at; finer scales upsample its features.
    pub trunk_resolution: usize,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, constraint: &str| {
            Err(Error::Config {
                key: format!("prior.{key}"),
                constraint: constraint.into(),
            })
        };
        if self.n_classes == 0 {
            return bad("n_classes", "must be ≥ 1");
        }
        if self.vocab < 2 || self.vocab > u16::MAX as usize + 1 {
            return bad("vocab", "must be in [2, 65536]");
        }
        if self.channels == 0 || self.scales == 0 || self.width == 0 || self.trunk_resolution == 0 {
            return bad("width", "channels, scales, width and trunk_resolution must be ≥ 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Values at or above the vocabulary size keep every token.
    pub top_k: usize,
    pub top_p: f64,
    pub cfg_scale: f64,
}

impl Default for SamplerConfig {
    /// Defaults for a 64-entry codebook.
    fn default() -> Self {
        SamplerConfig::new(64)
    }
}

impl SamplerConfig {
    pub fn new(vocab: usize) -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_k: vocab,
            top_p: 0.96,
            cfg_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::out_of_range("temperature", self.temperature, "(0, inf)"));
        }
        if self.top_k == 0 {
            return Err(Error::out_of_range("top_k", self.top_k, "[1, inf)"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::out_of_range("top_p", self.top_p, "(0, 1]"));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::out_of_range("cfg_scale", self.cfg_scale, "[0, inf)"));
        }
        Ok(())
    }
}

const CLASS_EMB: usize = 0;
const SCALE_EMB: usize = 1;
const STEM: usize = 2;
const ACT: usize = 3;
const SKIP: usize = 4;
const BLOCK_BASE: usize = 5;
const BLOCK_LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PriorModel {
    pub config: PriorConfig,
    pub layers: Vec<Layer>,
}

impl PriorModel {
    pub fn new(config: PriorConfig, key: StreamKey) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut rng = key.derive_str("prior-init").stream();
        let mut layers = vec![
            Layer::init(
                "class_embedding",
                LayerKind::Embedding {
                    rows: config.n_classes + 1,
                    dim: w,
                },
                0.5,
                &mut rng,
            ),
            Layer::init(
                "scale_embedding",
                LayerKind::Embedding {
                    rows: config.scales,
                    dim: w,
                },
                0.5,
                &mut rng,
            ),
            Layer::init(
                "stem",
                LayerKind::Conv1x1 {
                    inputs: config.channels,
                    outputs: w,
                },
                1.0,
                &mut rng,
            ),
            Layer::new("act", LayerKind::LeakyRelu { slope: LEAKY_SLOPE }, vec![])?,
            Layer::init(
                "skip",
                LayerKind::Conv1x1 {
                    inputs: config.channels,
                    outputs: w,
                },
                1.0,
                &mut rng,
            ),
        ];
        for b in 0..config.blocks {
            let conv = |name: &str, rng: &mut _| {
                Layer::init(format!("block{b}.{name}"), LayerKind::Conv3x3 { inputs: w, outputs: w }, 1.0, rng)
            };
            let norm = |name: &str, rng: &mut _| {
                Layer::init(
                    format!("block{b}.{name}"),
                    LayerKind::ChannelNorm { channels: w, eps: NORM_EPS },
                    1.0,
                    rng,
                )
            };
            layers.push(conv("conv_a", &mut rng));
            layers.push(norm("norm_a", &mut rng));
            layers.push(conv("conv_b", &mut rng));
            layers.push(norm("norm_b", &mut rng));
            layers.push(Layer::init(
                format!("block{b}.proj"),
                LayerKind::Conv1x1 { inputs: w, outputs: w },
                0.2,
                &mut rng,
            ));
        }
        layers.push(Layer::init(
            "head.norm",
            LayerKind::ChannelNorm { channels: w, eps: NORM_EPS },
            1.0,
            &mut rng,
        ));
        // Near-zero head so initial logits are close to uniform.
        layers.push(Layer::init(
            "head.logits",
            LayerKind::Conv1x1 {
                inputs: w,
                outputs: config.vocab,
            },
            0.01,
            &mut rng,
        ));
        Ok(PriorModel { config, layers })
    }

    pub fn null_class(&self) -> usize {
        self.config.n_classes
    }

    fn head_norm(&self) -> usize {
        BLOCK_BASE + BLOCK_LAYERS * self.config.blocks
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class > self.config.n_classes {
            return Err(Error::UnknownClass(class));
        }
        Ok(())
    }

    /// Logits `[N, h_k, w_k, V]` for a batch of prefixes already resampled
    /// to scale resolution. The trunk runs at no more than
    /// `trunk_resolution` per side; its features are resized to the scale and
    /// joined by a 1×1 projection of the full-resolution input.
    pub(crate) fn forward(&self, g: &mut Graph, inputs: Tensor, classes: &[usize], scale: usize) -> Result<Var> {
        let s = inputs.shape().to_vec();
        let (h, w) = (s[1], s[2]);
        let cap = self.config.trunk_resolution;
        let (th, tw) = (h.min(cap), w.min(cap));
        let x = g.input(inputs);
        let trunk_in = if (th, tw) == (h, w) { x } else { g.resize(x, th, tw, ResizeKind::Area)? };
        let ce = g.embed(CLASS_EMB, classes)?;
        let se = g.embed(SCALE_EMB, &vec![scale - 1; classes.len()])?;
        let cond = g.add(ce, se)?;
        let t = g.layer(STEM, trunk_in)?;
        let mut t = g.broadcast_add(t, cond)?;
        for b in 0..self.config.blocks {
            let base = BLOCK_BASE + BLOCK_LAYERS * b;
            let r = g.chain(&[base, base + 1, ACT, base + 2, base + 3, ACT, base + 4], t)?;
            t = g.add(t, r)?;
        }
        let t = if (th, tw) == (h, w) { t } else { g.resize(t, h, w, ResizeKind::Bilinear)? };
        let skip = g.layer(SKIP, x)?;
        let t = g.add(t, skip)?;
        let head = self.head_norm();
        g.chain(&[head, ACT, head + 1], t)
    }

    /// Trunk input for scale `k`: the prefix resampled to `(h_k, w_k)`.
    pub fn scale_input(&self, e_prev: &FeatureMap, k: usize, schedule: &ScaleSchedule) -> Result<FeatureMap> {
        schedule.check_scale(k)?;
        let (h, w) = schedule.full();
        if e_prev.dims() != (h, w, self.config.channels) {
            return Err(Error::shape(
                "prior",
                format!("prefix {:?}, expected {h}x{w}x{}", e_prev.dims(), self.config.channels),
            ));
        }
        Ok(schedule.downsample(e_prev, k))
    }

    /// Per-position logits for scale `k` (1-based), shape `[h_k, w_k, V]`.
    pub fn predict_scale_logits(
        &self,
        e_prev: &FeatureMap,
        class: usize,
        k: usize,
        schedule: &ScaleSchedule,
    ) -> Result<Tensor> {
        self.check_class(class)?;
        if k == 0 || k > self.config.scales {
            return Err(Error::out_of_range("scale", k, format!("[1, {}]", self.config.scales)));
        }
        let x = self.scale_input(e_prev, k, schedule)?;
        let (h, w, c) = x.dims();
        let mut g = Graph::inference(&self.layers);
        let out = self.forward(&mut g, Tensor::new(vec![1, h, w, c], x.into_data())?, &[class], k)?;
        let logits = g.value(out)?.clone();
        logits.reshape(&[h, w, self.config.vocab])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::json!({ "model": "prior", "config": self.config });
        Ok(encode_checkpoint(&self.layers, &meta))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (layers, meta) = decode_checkpoint(bytes)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("prior") {
            return Err(Error::Format("checkpoint does not hold a prior".into()));
        }
        let config: PriorConfig = serde_json::from_value(meta["config"].clone())?;
        let expected = PriorModel::new(config.clone(), StreamKey::root(0))?;
        if expected.layers.len() != layers.len()
            || expected.layers.iter().zip(&layers).any(|(a, b)| a.name != b.name || a.kind != b.kind)
        {
            return Err(Error::Format("prior checkpoint manifest does not match its config".into()));
        }
        Ok(PriorModel { config, layers })
    }
}

/// `(1 + s)·cond − s·uncond`.
pub fn cfg_mix(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return Err(Error::shape(
            "cfg_mix",
            format!("{:?} vs {:?}", cond.shape(), uncond.shape()),
        ));
    }
    let s = scale as f32;
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| (1.0 + s) * c - s * u)
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// Truncated, renormalised distribution of one position as `(token, prob)`
/// pairs in descending probability order (ties by token id).
pub fn truncated_distribution(logits: &[f32], config: &SamplerConfig) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(config.top_k.max(1));
    let max = logits[order[0]] as f64;
    let mut kept: Vec<(usize, f64)> = order
        .iter()
        .map(|&t| (t, ((logits[t] as f64 - max) / config.temperature).exp()))
        .collect();
    let total: f64 = kept.iter().map(|p| p.1).sum();
    let mut cum = 0.0;
    let mut cut = None;
    for (i, p) in kept.iter_mut().enumerate() {
        p.1 /= total;
        cum += p.1;
        if cum >= config.top_p && cut.is_none() {
            cut = Some(i + 1);
        }
    }
    let cut = cut.unwrap_or(kept.len());
    kept.truncate(cut);
    let total: f64 = kept.iter().map(|p| p.1).sum();
    for p in &mut kept {
        p.1 /= total;
    }
    kept
}

/// Inverse-CDF draw from a truncated distribution with uniform `u`.
fn draw(dist: &[(usize, f64)], u: f64) -> usize {
    let mut cum = 0.0;
    for &(t, p) in dist {
        cum += p;
        if u < cum {
            return t;
        }
    }
    dist.last().expect("nonempty").0
}

/// Independent draw at every position of `[h, w, V]` logits. Position `i`
/// (row-major) uses the single uniform of `key.derive(i)`.
pub fn sample_token_map(logits: &Tensor, scale: usize, config: &SamplerConfig, key: StreamKey) -> Result<TokenMap> {
    if logits.rank() != 3 {
        return Err(Error::shape("sample_token_map", format!("logits {:?}", logits.shape())));
    }
    let (h, w, v) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    config.validate()?;
    logits.check_finite("sample_token_map")?;
    let ids = logits
        .data()
        .chunks_exact(v)
        .enumerate()
        .map(|(i, row)| {
            let dist = truncated_distribution(row, config);
            let id = if dist.len() == 1 {
                dist[0].0
            } else {
                draw(&dist, key.derive(i as u64).uniform())
            };
            id as u16
        })
        .collect();
    TokenMap::new(scale, h, w, ids)
}

/// Conditional logits at scale `k`, mixed with the null-class pass when
/// guidance is on. Returns the logits and the number of prior forwards.
pub fn guided_logits(
    model: &PriorModel,
    e_prev: &FeatureMap,
    class: usize,
    k: usize,
    config: &SamplerConfig,
    schedule: &ScaleSchedule,
) -> Result<(Tensor, usize)> {
    let cond = model.predict_scale_logits(e_prev, class, k, schedule)?;
    if config.cfg_scale > 0.0 {
        let uncond = model.predict_scale_logits(e_prev, model.null_class(), k, schedule)?;
        Ok((cfg_mix(&cond, &uncond, config.cfg_scale)?, 2))
    } else {
        Ok((cond, 1))
    }
}

/// Key of the token draws at scale `k` of one generation.
pub fn scale_key(key: StreamKey, k: usize) -> StreamKey {
    key.derive_str("scale").derive(k as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub code: MultiScaleCode,
    /// Fused map `e_K`.
    pub image: FeatureMap,
    pub prior_forwards: usize,
}

/// Plain next-scale sampling.
pub fn generate_baseline(
    model: &PriorModel,
    class: usize,
    config: &SamplerConfig,
    book: &Codebook,
    schedule: &ScaleSchedule,
    key: StreamKey,
) -> Result<Generation> {
    model.check_class(class)?;
    config.validate()?;
    let (h, w) = schedule.full();
    let mut e = FeatureMap::zeros(h, w, book.channels());
    let mut maps = Vec::with_capacity(schedule.len());
    let mut forwards = 0;
    for k in 1..=schedule.len() {
        let (logits, n) = guided_logits(model, &e, class, k, config, schedule)?;
        forwards += n;
        let map = sample_token_map(&logits, k, config, scale_key(key, k))?;
        e = fuse_incremental(&e, &map, book, schedule)?;
        maps.push(map);
    }
    Ok(Generation {
        code: MultiScaleCode { maps },
        image: e,
        prior_forwards: forwards,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub base_rate: f32,
    pub warmup_fraction: f64,
    pub class_drop_p: f64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            epochs: 30,
            batch: 64,
            base_rate: 3e-4,
            warmup_fraction: 0.05,
            class_drop_p: 0.1,
        }
    }
}

/// Ground-truth teacher-forcing data for one sample.
#[derive(Clone, Debug)]
pub struct TeacherSample {
    pub class: usize,
    /// Per scale: the prefix resampled to scale resolution.
    pub inputs: Vec<FeatureMap>,
    pub code: MultiScaleCode,
}

impl TeacherSample {
    pub fn from_code(
        model: &PriorModel,
        class: usize,
        code: MultiScaleCode,
        book: &Codebook,
        schedule: &ScaleSchedule,
    ) -> Result<Self> {
        let (h, w) = schedule.full();
        let mut e = FeatureMap::zeros(h, w, book.channels());
        let mut inputs = Vec::with_capacity(schedule.len());
        for (i, map) in code.maps.iter().enumerate() {
            inputs.push(model.scale_input(&e, i + 1, schedule)?);
            e = fuse_incremental(&e, map, book, schedule)?;
        }
        Ok(TeacherSample { class, inputs, code })
    }
}

/// Encode images into teacher-forcing samples in parallel.
pub fn teacher_samples(
    model: &PriorModel,
    images: &[(usize, &FeatureMap)],
    book: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<Vec<TeacherSample>> {
    images
        .par_iter()
        .map(|&(class, f)| {
            let code = encode_multiscale(f, book, schedule)?.code;
            TeacherSample::from_code(model, class, code, book, schedule)
        })
        .collect()
}

/// Cross-entropy of `[.., V]` logits against `targets`; returns the summed
/// loss and `∂(weight · loss)/∂logits`.
fn cross_entropy(logits: &Tensor, targets: &[u16], weight: f64) -> (f64, Tensor) {
    let v = logits.last_dim();
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0;
    for (i, (row, &t)) in logits.data().chunks_exact(v).zip(targets).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&l| (l as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[t as usize] as f64;
        for (j, &l) in row.iter().enumerate() {
            let p = (l as f64 - log_z).exp();
            let y = if j == t as usize { 1.0 } else { 0.0 };
            grad[i * v + j] = ((p - y) * weight) as f32;
        }
    }
    (total, Tensor::new(logits.shape().to_vec(), grad).unwrap())
}

/// Summed per-scale mean cross-entropy of a batch and its parameter
/// gradients.
fn batch_loss(model: &PriorModel, batch: &[&TeacherSample], classes: &[usize]) -> Result<(f64, Vec<Vec<Tensor>>)> {
    let mut grads = zero_param_grads(&model.layers);
    let mut loss = 0.0;
    let scales = model.config.scales;
    for k in 1..=scales {
        let (h, w, c) = batch[0].inputs[k - 1].dims();
        let mut data = Vec::with_capacity(batch.len() * h * w * c);
        let mut targets = Vec::with_capacity(batch.len() * h * w);
        for s in batch {
            data.extend_from_slice(s.inputs[k - 1].data());
            targets.extend_from_slice(&s.code.maps[k - 1].ids);
        }
        let mut g = Graph::new(&model.layers);
        let out = model.forward(&mut g, Tensor::new(vec![batch.len(), h, w, c], data)?, classes, k)?;
        let n_tokens = (batch.len() * h * w) as f64;
        let (l, dlogits) = cross_entropy(g.value(out)?, &targets, 1.0 / (n_tokens * scales as f64));
        loss += l / n_tokens / scales as f64;
        accumulate_param_grads(&mut grads, &g.backward(out, &dlogits)?.params);
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean per-token cross-entropy of each epoch (scales weighted equally).
    pub epoch_loss: Vec<f64>,
}

/// Rows of the class table replaced by the null class for this step.
pub fn dropped_classes(model: &PriorModel, batch: &[&TeacherSample], drop_p: f64, key: StreamKey) -> Vec<usize> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if drop_p > 0.0 && key.derive(i as u64).uniform() < drop_p {
                model.null_class()
            } else {
                s.class
            }
        })
        .collect()
}

/// Per-batch mean loss at the current parameters, no update.
pub fn evaluate_prior_loss(model: &PriorModel, data: &[TeacherSample]) -> Result<f64> {
    let refs: Vec<&TeacherSample> = data.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(64) {
        let classes: Vec<usize> = chunk.iter().map(|s| s.class).collect();
        let scales = model.config.scales;
        for k in 1..=scales {
            let (h, w, c) = chunk[0].inputs[k - 1].dims();
            let mut x = Vec::new();
            let mut targets = Vec::new();
            for s in chunk {
                x.extend_from_slice(s.inputs[k - 1].data());
                targets.extend_from_slice(&s.code.maps[k - 1].ids);
            }
            let mut g = Graph::inference(&model.layers);
            let out = model.forward(&mut g, Tensor::new(vec![chunk.len(), h, w, c], x)?, &classes, k)?;
            let n_tokens = (chunk.len() * h * w) as f64;
            total += cross_entropy(g.value(out)?, &targets, 0.0).0 / n_tokens / scales as f64 * chunk.len() as f64;
        }
    }
    Ok(total / data.len() as f64)
}

/// Teacher-forced maximum likelihood with Adam and a warmup–cosine schedule.
/// The visiting order and class dropping are fixed by `key`.
pub fn train_prior(
    model: &mut PriorModel,
    data: &[TeacherSample],
    config: &PriorTrainConfig,
    key: StreamKey,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Dataset("prior training set is empty".into()));
    }
    if config.batch == 0 || config.epochs == 0 {
        return Err(Error::Config {
            key: "prior_train".into(),
            constraint: "epochs and batch must be ≥ 1".into(),
        });
    }
    if !(0.0..1.0).contains(&config.class_drop_p) {
        return Err(Error::out_of_range("class_drop_p", config.class_drop_p, "[0, 1)"));
    }
    for s in data {
        model.check_class(s.class)?;
        if s.code.len() != model.config.scales {
            return Err(Error::Dataset(format!(
                "teacher sample has {} scales, model expects {}",
                s.code.len(),
                model.config.scales
            )));
        }
    }
    let steps_per_epoch = data.len().div_ceil(config.batch);
    let total = steps_per_epoch * config.epochs;
    let warmup = ((total as f64 * config.warmup_fraction) as usize).min(total - 1);
    let schedule = LrSchedule::new(config.base_rate, warmup, total)?;
    let mut state = OptimizerState::new(&model.layers);
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let ekey = key.derive_str("epoch").derive(epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ekey.derive_str("order").stream());
        let mut sum = 0.0;
        for (b, idx) in order.chunks(config.batch).enumerate() {
            let batch: Vec<&TeacherSample> = idx.iter().map(|&i| &data[i]).collect();
            let classes = dropped_classes(model, &batch, config.class_drop_p, ekey.derive_str("drop").derive(b as u64));
            let (loss, grads) = batch_loss(model, &batch, &classes)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "prior loss {loss} at epoch {epoch}, batch {b}, step {step}"
                )));
            }
            step += 1;
            let rate = lr_at(&schedule, step)?;
            adam_update(&mut model.layers, &grads, &mut state, rate, ADAM_BETAS, ADAM_EPS)?;
            sum += loss * batch.len() as f64;
        }
        let mean = sum / data.len() as f64;
        progress(epoch, mean);
        epoch_loss.push(mean);
    }
    Ok(TrainReport { epoch_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PriorConfig {
        PriorConfig {
            n_classes: 3,
            vocab: 8,
            channels: 2,
            scales: 3,
            width: 8,
            blocks: 1,
            trunk_resolution: 2,
        }
    }

    fn setup() -> (PriorModel, Codebook, ScaleSchedule) {
        let model = PriorModel::new(small_config(), StreamKey::root(1)).unwrap();
        let schedule = ScaleSchedule::powers_of_two(4).unwrap();
        let mut rng = StreamKey::root(2).stream();
        let mut vectors = vec![0.0f32; 2];
        for _ in 0..7 {
            vectors.push(rng.uniform_in(-1.0, 1.0) as f32);
            vectors.push(rng.uniform_in(-1.0, 1.0) as f32);
        }
        (model, Codebook::new(8, 2, vectors).unwrap(), schedule)
    }

    #[test]
    fn cfg_mix_examples() {
        let c = Tensor::from_slice(&[2], &[2.0, 0.0]).unwrap();
        let u = Tensor::from_slice(&[2], &[0.0, 0.0]).unwrap();
        assert_eq!(cfg_mix(&c, &u, 1.0).unwrap().data(), &[4.0, 0.0]);
        assert_eq!(cfg_mix(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_mix(&c, &c, 3.5).unwrap(), c);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let (model, _, schedule) = setup();
        let e = FeatureMap::zeros(4, 4, 2);
        let a = model.predict_scale_logits(&e, 1, 1, &schedule).unwrap();
        assert_eq!(a.shape(), &[1, 1, 8]);
        assert_eq!(a, model.predict_scale_logits(&e, 1, 1, &schedule).unwrap());
        assert_eq!(model.predict_scale_logits(&e, 1, 3, &schedule).unwrap().shape(), &[4, 4, 8]);
        assert!(model.predict_scale_logits(&e, 1, 4, &schedule).is_err());
        assert!(model.predict_scale_logits(&e, 1, 0, &schedule).is_err());
        assert!(matches!(
            model.predict_scale_logits(&e, 9, 1, &schedule),
            Err(Error::UnknownClass(9))
        ));
    }

    #[test]
    fn identical_class_rows_make_class_irrelevant() {
        let (mut model, _, schedule) = setup();
        let row: Vec<f32> = model.layers[CLASS_EMB].params[0].data()[..8].to_vec();
        for chunk in model.layers[CLASS_EMB].params[0].data_mut().chunks_mut(8) {
            chunk.copy_from_slice(&row);
        }
        let mut e = FeatureMap::zeros(4, 4, 2);
        e.data_mut()[3] = 0.7;
        for k in 1..=3 {
            let a = model.predict_scale_logits(&e, 0, k, &schedule).unwrap();
            assert_eq!(a, model.predict_scale_logits(&e, 2, k, &schedule).unwrap());
        }
    }

    #[test]
    fn greedy_and_saturated_sampling() {
        let logits = Tensor::from_slice(&[1, 2, 3], &[0.1, 0.5, 0.2, 3.0, 3.0, -1.0]).unwrap();
        let mut cfg = SamplerConfig::new(3);
        cfg.top_k = 1;
        for seed in 0..20 {
            let m = sample_token_map(&logits, 2, &cfg, StreamKey::root(seed)).unwrap();
            assert_eq!(m.ids, vec![1, 0]);
        }
        let hot = Tensor::from_slice(&[1, 1, 3], &[0.0, 31.0, 0.5]).unwrap();
        let cfg = SamplerConfig {
            temperature: 2.0,
            top_k: 3,
            top_p: 1.0,
            cfg_scale: 0.0,
        };
        for seed in 0..200 {
            assert_eq!(sample_token_map(&hot, 1, &cfg, StreamKey::root(seed)).unwrap().ids, vec![1]);
        }
    }

    #[test]
    fn empirical_frequency_matches_categorical() {
        let logits = Tensor::from_slice(&[1, 1, 2], &[0.7f32.ln(), 0.3f32.ln()]).unwrap();
        let cfg = SamplerConfig {
            temperature: 1.0,
            top_k: 2,
            top_p: 1.0,
            cfg_scale: 0.0,
        };
        let root = StreamKey::root(11);
        let hits = (0..20_000)
            .filter(|&i| sample_token_map(&logits, 1, &cfg, root.derive(i)).unwrap().ids[0] == 0)
            .count();
        assert!((hits as f64 / 20_000.0 - 0.7).abs() < 0.01);
    }

    #[test]
    fn baseline_counts_forwards_and_is_deterministic() {
        let (model, book, schedule) = setup();
        let mut cfg = SamplerConfig::new(8);
        let a = generate_baseline(&model, 0, &cfg, &book, &schedule, StreamKey::root(4)).unwrap();
        assert_eq!(a.prior_forwards, 3);
        assert_eq!(a, generate_baseline(&model, 0, &cfg, &book, &schedule, StreamKey::root(4)).unwrap());
        cfg.cfg_scale = 1.5;
        let b = generate_baseline(&model, 0, &cfg, &book, &schedule, StreamKey::root(4)).unwrap();
        assert_eq!(b.prior_forwards, 6);
    }

    #[test]
    fn zero_guidance_matches_forced_dual_pass() {
        let (model, book, schedule) = setup();
        let cfg = SamplerConfig::new(8);
        let e = FeatureMap::zeros(4, 4, 2);
        let cond = model.predict_scale_logits(&e, 1, 2, &schedule).unwrap();
        let uncond = model.predict_scale_logits(&e, model.null_class(), 2, &schedule).unwrap();
        let mixed = cfg_mix(&cond, &uncond, 0.0).unwrap();
        let (single, n) = guided_logits(&model, &e, 1, 2, &cfg, &schedule).unwrap();
        assert_eq!(n, 1);
        assert_eq!(mixed, single);
        let _ = book;
    }

    #[test]
    fn initial_loss_is_near_uniform_and_null_row_untouched_without_dropping() {
        let (mut model, book, schedule) = setup();
        let world_maps: Vec<FeatureMap> = (0..6)
            .map(|i| {
                let mut rng = StreamKey::root(50 + i).stream();
                let data = (0..32).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
                FeatureMap::new(4, 4, 2, data).unwrap()
            })
            .collect();
        let images: Vec<(usize, &FeatureMap)> = world_maps.iter().enumerate().map(|(i, m)| (i % 3, m)).collect();
        let data = teacher_samples(&model, &images, &book, &schedule).unwrap();
        let init = evaluate_prior_loss(&model, &data).unwrap();
        assert!((init - 8f64.ln()).abs() < 0.1 * 8f64.ln(), "{init}");

        let null_before = model.layers[CLASS_EMB].params[0].data()[24..32].to_vec();
        let cfg = PriorTrainConfig {
            epochs: 2,
            batch: 4,
            base_rate: 1e-3,
            warmup_fraction: 0.0,
            class_drop_p: 0.0,
        };
        train_prior(&mut model, &data, &cfg, StreamKey::root(3), |_, _| {}).unwrap();
        assert_eq!(&model.layers[CLASS_EMB].params[0].data()[24..32], &null_before[..]);
    }

    #[test]
    fn memorizes_a_single_sample() {
        let (_, book, schedule) = setup();
        let config = PriorConfig {
            trunk_resolution: 4,
            ..small_config()
        };
        let mut model = PriorModel::new(config, StreamKey::root(1)).unwrap();
        let mut rng = StreamKey::root(8).stream();
        let f = FeatureMap::new(4, 4, 2, (0..32).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect()).unwrap();
        let data = teacher_samples(&model, &[(1, &f)], &book, &schedule).unwrap();
        let cfg = PriorTrainConfig {
            epochs: 200,
            batch: 1,
            base_rate: 1e-2,
            warmup_fraction: 0.05,
            class_drop_p: 0.0,
        };
        let report = train_prior(&mut model, &data, &cfg, StreamKey::root(3), |_, _| {}).unwrap();
        assert!(*report.epoch_loss.last().unwrap() < 0.1, "{:?}", report.epoch_loss.last());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, _, _) = setup();
        assert_eq!(PriorModel::from_bytes(&model.to_bytes().unwrap()).unwrap(), model);
    }
}
