//! Latent scale rejection sampling: the scoring model, its dataset and
//! losses, and the candidate-selecting generation loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::eval::{scorer_diagnostics, ScoredPoint, ScorerDiagnostics};
use crate::msvq::{fuse, fuse_incremental, Codebook, MultiScaleCode, ScaleSchedule};
use crate::nn::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::nn::graph::{Graph, Var};
use crate::nn::layer::{Layer, LayerKind, LEAKY_SLOPE, NORM_EPS};
use crate::nn::optim::{adam_update, lr_at, LrSchedule, OptimizerState, ADAM_BETAS, ADAM_EPS};
use crate::nn::resize::ResizeKind;
use crate::nn::tensor::{FeatureMap, Tensor};
use crate::prior::{generate_baseline, guided_logits, sample_token_map, scale_key, Generation, PriorModel, SamplerConfig};
use crate::rng::StreamKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub n_classes: usize,
    pub scales: usize,
    pub channels: usize,
    pub canvas: usize,
    /// Channel width of each stride-2 stage.
    pub widths: Vec<usize>,
    /// Channels of the terminal feature map before flattening.
    pub feature_channels: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl ScorerConfig {
    pub fn standard(n_classes: usize, scales: usize, channels: usize, canvas: usize) -> Self {
        ScorerConfig {
            n_classes,
            scales,
            channels,
            canvas,
            widths: vec![32, 64, 128, 256],
            feature_channels: 256,
            embed_dim: 128,
            hidden: vec![256, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, constraint: String| {
            Err(Error::Config {
                key: format!("scorer.{key}"),
                constraint,
            })
        };
        if self.n_classes == 0 || self.scales == 0 || self.channels == 0 {
            return bad("n_classes", "classes, scales and channels must be ≥ 1".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths", "need at least one stage, all widths ≥ 1".into());
        }
        let div = 1usize << self.widths.len();
        if self.canvas % div != 0 {
            return bad("widths", format!("canvas {} must be divisible by 2^stages = {div}", self.canvas));
        }
        if self.feature_channels == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return bad("hidden", "feature, embedding and hidden sizes must be ≥ 1".into());
        }
        Ok(())
    }

    /// Length of the flattened terminal feature.
    pub fn flat_features(&self) -> usize {
        let side = self.canvas >> self.widths.len();
        side * side * self.feature_channels
    }
}

const CLASS_EMB: usize = 0;
const SCALE_EMB: usize = 1;
const ACT: usize = 2;
const STEM: usize = 3;
const STAGE_BASE: usize = 4;
const STAGE_LAYERS: usize = 6;

/// Scalar judge `S(c, e_k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringModel {
    pub config: ScorerConfig,
    pub layers: Vec<Layer>,
}

impl ScoringModel {
    /// Random trunk and hidden layers; the output layer starts at zero.
    pub fn new(config: ScorerConfig, key: StreamKey) -> Result<Self> {
        config.validate()?;
        let mut rng = key.derive_str("scorer-init").stream();
        let d = config.embed_dim;
        let mut layers = vec![
            Layer::init(
                "class_embedding",
                LayerKind::Embedding {
                    rows: config.n_classes,
                    dim: d,
                },
                0.5,
                &mut rng,
            ),
            Layer::init(
                "scale_embedding",
                LayerKind::Embedding {
                    rows: config.scales,
                    dim: d,
                },
                0.5,
                &mut rng,
            ),
            Layer::new("act", LayerKind::LeakyRelu { slope: LEAKY_SLOPE }, vec![])?,
            Layer::init(
                "stem",
                LayerKind::Conv3x3 {
                    inputs: config.channels,
                    outputs: config.widths[0],
                },
                1.0,
                &mut rng,
            ),
        ];
        let mut prev = config.widths[0];
        for (s, &w) in config.widths.iter().enumerate() {
            let name = |n: &str| format!("stage{s}.{n}");
            layers.push(Layer::init(name("transition"), LayerKind::Conv1x1 { inputs: prev, outputs: w }, 1.0, &mut rng));
            layers.push(Layer::init(name("conv_a"), LayerKind::Conv3x3 { inputs: w, outputs: w }, 1.0, &mut rng));
            layers.push(Layer::init(
                name("norm_a"),
                LayerKind::ChannelNorm { channels: w, eps: NORM_EPS },
                1.0,
                &mut rng,
            ));
            layers.push(Layer::init(name("conv_b"), LayerKind::Conv3x3 { inputs: w, outputs: w }, 1.0, &mut rng));
            layers.push(Layer::init(
                name("norm_b"),
                LayerKind::ChannelNorm { channels: w, eps: NORM_EPS },
                1.0,
                &mut rng,
            ));
            layers.push(Layer::init(name("proj"), LayerKind::Conv1x1 { inputs: w, outputs: w }, 0.2, &mut rng));
            prev = w;
        }
        layers.push(Layer::init(
            "feature",
            LayerKind::Conv1x1 {
                inputs: prev,
                outputs: config.feature_channels,
            },
            1.0,
            &mut rng,
        ));
        let mut width = config.flat_features() + 2 * d;
        for (i, &h) in config.hidden.iter().enumerate() {
            layers.push(Layer::init(
                format!("head.dense{i}"),
                LayerKind::Dense {
                    inputs: width,
                    outputs: h,
                },
                1.0,
                &mut rng,
            ));
            width = h;
        }
        layers.push(Layer::zero_init(
            "head.out",
            LayerKind::Dense {
                inputs: width,
                outputs: 1,
            },
        ));
        Ok(ScoringModel { config, layers })
    }

    fn feature_layer(&self) -> usize {
        STAGE_BASE + STAGE_LAYERS * self.config.widths.len()
    }

    /// Scores `[N, 1]` for stacked fused maps.
    pub(crate) fn forward(&self, g: &mut Graph, maps: Tensor, classes: &[usize], scales: &[usize]) -> Result<Var> {
        let n = classes.len();
        let x = g.input(maps);
        let mut h = g.chain(&[STEM, ACT], x)?;
        let mut side = self.config.canvas;
        for s in 0..self.config.widths.len() {
            side /= 2;
            h = g.resize(h, side, side, ResizeKind::Area)?;
            let base = STAGE_BASE + STAGE_LAYERS * s;
            h = g.layer(base, h)?;
            let r = g.chain(&[base + 1, base + 2, ACT, base + 3, base + 4, ACT, base + 5], h)?;
            h = g.add(h, r)?;
        }
        let f = self.feature_layer();
        let feat = g.layer(f, h)?;
        let flat = g.reshape(feat, &[n, self.config.flat_features()])?;
        let ce = g.embed(CLASS_EMB, classes)?;
        let zero_based: Vec<usize> = scales.iter().map(|&k| k - 1).collect();
        let se = g.embed(SCALE_EMB, &zero_based)?;
        let joined = g.concat(flat, ce)?;
        let mut z = g.concat(joined, se)?;
        for i in 0..self.config.hidden.len() {
            z = g.chain(&[f + 1 + i, ACT], z)?;
        }
        g.layer(f + 1 + self.config.hidden.len(), z)
    }

    fn check_item(&self, class: usize, map: &FeatureMap, k: usize) -> Result<()> {
        if class >= self.config.n_classes {
            return Err(Error::UnknownClass(class));
        }
        if k == 0 || k > self.config.scales {
            return Err(Error::out_of_range("scale", k, format!("[1, {}]", self.config.scales)));
        }
        let c = &self.config;
        if map.dims() != (c.canvas, c.canvas, c.channels) {
            return Err(Error::shape(
                "scorer",
                format!("map {:?}, expected {}x{}x{}", map.dims(), c.canvas, c.canvas, c.channels),
            ));
        }
        Ok(())
    }

    /// Scores of `(class, e_k, k)` triples, evaluated in one forward pass.
    pub fn score_batch(&self, items: &[(usize, &FeatureMap, usize)]) -> Result<Vec<f32>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        for &(c, m, k) in items {
            self.check_item(c, m, k)?;
        }
        let maps: Vec<&FeatureMap> = items.iter().map(|i| i.1).collect();
        let classes: Vec<usize> = items.iter().map(|i| i.0).collect();
        let scales: Vec<usize> = items.iter().map(|i| i.2).collect();
        let mut g = Graph::inference(&self.layers);
        let out = self.forward(&mut g, FeatureMap::stack(&maps)?, &classes, &scales)?;
        Ok(g.value(out)?.data().to_vec())
    }

    pub fn score(&self, class: usize, map: &FeatureMap, k: usize) -> Result<f32> {
        Ok(self.score_batch(&[(class, map, k)])?[0])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::json!({ "model": "scorer", "config": self.config });
        Ok(encode_checkpoint(&self.layers, &meta))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (layers, meta) = decode_checkpoint(bytes)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("scorer") {
            return Err(Error::Format("checkpoint does not hold a scorer".into()));
        }
        let config: ScorerConfig = serde_json::from_value(meta["config"].clone())?;
        let expected = ScoringModel::new(config.clone(), StreamKey::root(0))?;
        if expected.layers.len() != layers.len()
            || expected.layers.iter().zip(&layers).any(|(a, b)| a.name != b.name || a.kind != b.kind)
        {
            return Err(Error::Format("scorer checkpoint manifest does not match its config".into()));
        }
        Ok(ScoringModel { config, layers })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean `−log σ(S_real − S_gen)` over pairs, with gradients with respect to
/// both score vectors.
pub fn pairwise_loss(real: &[f64], generated: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if real.len() != generated.len() || real.is_empty() {
        return Err(Error::shape(
            "pairwise_loss",
            format!("{} real vs {} generated scores", real.len(), generated.len()),
        ));
    }
    let n = real.len() as f64;
    let mut loss = 0.0;
    let mut d_real = Vec::with_capacity(real.len());
    let mut d_gen = Vec::with_capacity(real.len());
    for (&r, &g) in real.iter().zip(generated) {
        let x = r - g;
        loss += softplus(-x);
        let d = (sigmoid(x) - 1.0) / n;
        d_real.push(d);
        d_gen.push(-d);
    }
    Ok((loss / n, d_real, d_gen))
}

/// Mean binary cross-entropy of scores as logits, with its gradient.
pub fn pointwise_loss(scores: &[f64], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape(
            "pointwise_loss",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        loss += if y { softplus(-s) } else { softplus(s) };
        grad.push((sigmoid(s) - if y { 1.0 } else { 0.0 }) / n);
    }
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Generated,
    Real,
}

impl Label {
    pub fn is_real(self) -> bool {
        self == Label::Real
    }
}

/// One full code trajectory; each of its scales is a datapoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub class: usize,
    pub label: Label,
    /// Raw stream key of a generated trajectory, or the corpus index of a
    /// real one.
    pub source: u64,
    pub code: MultiScaleCode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreDatapoint {
    pub trajectory: usize,
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreManifest {
    pub pool: String,
    pub n_classes: usize,
    pub scales: usize,
    pub vocab: usize,
    pub gen_per_class: usize,
    pub real_per_class: Vec<usize>,
    /// `counts[c][k-1] = (generated, real)` datapoints.
    pub counts: Vec<Vec<(usize, usize)>>,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDataset {
    pub manifest: ScoreManifest,
    pub trajectories: Vec<Trajectory>,
}

pub const SCORE_DATASET_MAGIC: &[u8; 4] = b"LSSD";
const SCORE_DATASET_VERSION: u32 = 1;

/// Root key of the generated negatives of one pool.
pub fn negative_pool_key(root: StreamKey, pool: &str) -> StreamKey {
    root.derive_str("score-negatives").derive_str(pool)
}

/// Negatives from the prior's own trajectories plus encoded real codes as
/// positives.
pub fn build_score_dataset(
    prior: &PriorModel,
    real: &[(usize, u64, MultiScaleCode)],
    book: &Codebook,
    schedule: &ScaleSchedule,
    n_gen_per_class: usize,
    sampler: &SamplerConfig,
    root: StreamKey,
    pool: &str,
) -> Result<ScoreDataset> {
    let n_classes = prior.config.n_classes;
    let mut real_per_class = vec![0usize; n_classes];
    for (c, _, code) in real {
        if *c >= n_classes {
            return Err(Error::UnknownClass(*c));
        }
        code.validate(schedule, book.size())?;
        real_per_class[*c] += 1;
    }
    if let Some(c) = real_per_class.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("class {c} has no real positives")));
    }
    let key = negative_pool_key(root, pool);
    let jobs: Vec<(usize, usize)> = (0..n_classes)
        .flat_map(|c| (0..n_gen_per_class).map(move |i| (c, i)))
        .collect();
    let mut trajectories: Vec<Trajectory> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let k = key.derive(c as u64).derive(i as u64);
            let g = generate_baseline(prior, c, sampler, book, schedule, k)?;
            Ok(Trajectory {
                class: c,
                label: Label::Generated,
                source: k.raw(),
                code: g.code,
            })
        })
        .collect::<Result<_>>()?;
    trajectories.extend(real.iter().map(|(c, idx, code)| Trajectory {
        class: *c,
        label: Label::Real,
        source: *idx,
        code: code.clone(),
    }));
    let mut data = ScoreDataset {
        manifest: ScoreManifest {
            pool: pool.to_string(),
            n_classes,
            scales: schedule.len(),
            vocab: book.size(),
            gen_per_class: n_gen_per_class,
            real_per_class,
            counts: Vec::new(),
            sampler: *sampler,
        },
        trajectories,
    };
    data.manifest.counts = data.counts();
    Ok(data)
}

impl ScoreDataset {
    /// Every `(trajectory, scale)` pair whose scale passes `keep`.
    pub fn datapoints(&self, keep: impl Fn(usize) -> bool) -> Vec<ScoreDatapoint> {
        let mut out = Vec::new();
        for (t, traj) in self.trajectories.iter().enumerate() {
            for k in 1..=traj.code.len() {
                if keep(k) {
                    out.push(ScoreDatapoint { trajectory: t, scale: k });
                }
            }
        }
        out
    }

    /// `counts[c][k-1] = (generated, real)`.
    pub fn counts(&self) -> Vec<Vec<(usize, usize)>> {
        let m = &self.manifest;
        let mut counts = vec![vec![(0, 0); m.scales]; m.n_classes];
        for t in &self.trajectories {
            for k in 0..t.code.len() {
                match t.label {
                    Label::Generated => counts[t.class][k].0 += 1,
                    Label::Real => counts[t.class][k].1 += 1,
                }
            }
        }
        counts
    }

    /// The fused prefix `e_k` of a datapoint.
    pub fn fused(&self, dp: ScoreDatapoint, book: &Codebook, schedule: &ScaleSchedule) -> Result<FeatureMap> {
        fuse(&self.trajectories[dp.trajectory].code.prefix(dp.scale), book, schedule)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_header(SCORE_DATASET_MAGIC, SCORE_DATASET_VERSION);
        w.str(&serde_json::to_string(&self.manifest)?);
        w.u64(self.trajectories.len() as u64);
        for t in &self.trajectories {
            w.u16(t.class as u16);
            w.u8(t.label.is_real() as u8);
            w.u64(t.source);
            t.code.write(&mut w);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = ByteReader::header(bytes, SCORE_DATASET_MAGIC, "score dataset")?;
        if version != SCORE_DATASET_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let manifest: ScoreManifest = serde_json::from_str(&r.str()?)?;
        let n = r.u64()? as usize;
        let mut trajectories = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let class = r.u16()? as usize;
            let label = match r.u8()? {
                0 => Label::Generated,
                1 => Label::Real,
                other => return Err(r.err(&format!("label {other} is not binary"))),
            };
            let source = r.u64()?;
            let code = MultiScaleCode::read(&mut r)?;
            trajectories.push(Trajectory {
                class,
                label,
                source,
                code,
            });
        }
        r.expect_end()?;
        Ok(ScoreDataset { manifest, trajectories })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Pairwise,
    Pointwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerTrainConfig {
    pub epochs: usize,
    /// Scorer inputs per step; pairwise steps hold `batch / 2` pairs.
    pub batch: usize,
    pub base_rate: f32,
    pub warmup_epochs: usize,
    pub loss: LossKind,
    pub exclude_first_scale: bool,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        ScorerTrainConfig {
            epochs: 8,
            batch: 128,
            base_rate: 3e-4,
            warmup_epochs: 1,
            loss: LossKind::Pairwise,
            exclude_first_scale: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScorerEpoch {
    pub train_loss: f64,
    pub validation: Option<ScorerDiagnostics>,
}

/// Score every datapoint of a dataset.
pub fn score_dataset(
    model: &ScoringModel,
    data: &ScoreDataset,
    book: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<Vec<ScoredPoint>> {
    let points = data.datapoints(|_| true);
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(64) {
        let maps = chunk
            .par_iter()
            .map(|&dp| data.fused(dp, book, schedule))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<(usize, &FeatureMap, usize)> = chunk
            .iter()
            .zip(&maps)
            .map(|(dp, m)| (data.trajectories[dp.trajectory].class, m, dp.scale))
            .collect();
        let scores = model.score_batch(&items)?;
        for (dp, s) in chunk.iter().zip(scores) {
            let t = &data.trajectories[dp.trajectory];
            out.push(ScoredPoint {
                class: t.class,
                scale: dp.scale,
                real: t.label.is_real(),
                score: s as f64,
            });
        }
    }
    Ok(out)
}

/// Pairs matched on `(class, scale)`; partners are shuffled per epoch and
/// groups are keyed independently so dropping a scale leaves the others'
/// pairs untouched.
fn epoch_pairs(data: &ScoreDataset, key: StreamKey) -> Vec<(ScoreDatapoint, ScoreDatapoint)> {
    let m = &data.manifest;
    let mut groups: Vec<Vec<(Vec<ScoreDatapoint>, Vec<ScoreDatapoint>)>> =
        vec![vec![(Vec::new(), Vec::new()); m.scales]; m.n_classes];
    for (t, traj) in data.trajectories.iter().enumerate() {
        for k in 1..=traj.code.len() {
            let dp = ScoreDatapoint { trajectory: t, scale: k };
            let g = &mut groups[traj.class][k - 1];
            if traj.label.is_real() {
                g.1.push(dp);
            } else {
                g.0.push(dp);
            }
        }
    }
    let mut pairs = Vec::new();
    for (c, per_scale) in groups.iter_mut().enumerate() {
        for (k, (gen, real)) in per_scale.iter_mut().enumerate() {
            let gk = key.derive(c as u64).derive(k as u64);
            real.shuffle(&mut gk.derive_str("real").stream());
            gen.shuffle(&mut gk.derive_str("generated").stream());
            pairs.extend(real.iter().zip(gen.iter()).map(|(&r, &g)| (r, g)));
        }
    }
    pairs.shuffle(&mut key.derive_str("order").stream());
    pairs
}

/// Stacked fused inputs of a batch with their classes and scales.
fn batch_inputs(
    data: &ScoreDataset,
    points: &[ScoreDatapoint],
    book: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let maps = points
        .par_iter()
        .map(|&dp| data.fused(dp, book, schedule))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FeatureMap> = maps.iter().collect();
    let classes = points.iter().map(|dp| data.trajectories[dp.trajectory].class).collect();
    let scales = points.iter().map(|dp| dp.scale).collect();
    Ok((FeatureMap::stack(&refs)?, classes, scales))
}

/// Adam training with one warmup epoch and cosine decay. Validation
/// diagnostics, when a validation set is given, are computed after every
/// epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_scorer(
    model: &mut ScoringModel,
    train: &ScoreDataset,
    validation: Option<&ScoreDataset>,
    book: &Codebook,
    schedule: &ScaleSchedule,
    config: &ScorerTrainConfig,
    key: StreamKey,
    mut progress: impl FnMut(usize, &ScorerEpoch),
) -> Result<Vec<ScorerEpoch>> {
    if config.epochs == 0 || config.batch < 2 {
        return Err(Error::Config {
            key: "scorer_train".into(),
            constraint: "epochs ≥ 1 and batch ≥ 2".into(),
        });
    }
    let first = if config.exclude_first_scale { 2 } else { 1 };
    let counts = train.counts();
    for (c, per_scale) in counts.iter().enumerate() {
        for (k, &(g, r)) in per_scale.iter().enumerate().skip(first - 1) {
            if g == 0 || r == 0 {
                return Err(Error::Dataset(format!(
                    "class {c} scale {} lacks one label ({g} generated, {r} real)",
                    k + 1
                )));
            }
        }
    }
    let keep = |k: usize| k >= first;
    let pair_batch = (config.batch / 2).max(1);
    let steps_per_epoch = match config.loss {
        LossKind::Pairwise => epoch_pairs(train, key).iter().filter(|p| keep(p.0.scale)).count().div_ceil(pair_batch),
        LossKind::Pointwise => train.datapoints(keep).len().div_ceil(config.batch),
    };
    if steps_per_epoch == 0 {
        return Err(Error::Dataset("score dataset yields no training examples".into()));
    }
    let total = steps_per_epoch * config.epochs;
    let warmup = (steps_per_epoch * config.warmup_epochs).min(total - 1);
    let lr = LrSchedule::new(config.base_rate, warmup, total)?;
    let mut state = OptimizerState::new(&model.layers);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let ekey = key.derive_str("epoch").derive(epoch as u64);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let batches: Vec<Vec<ScoreDatapoint>> = match config.loss {
            LossKind::Pairwise => {
                let pairs: Vec<_> = epoch_pairs(train, ekey).into_iter().filter(|p| keep(p.0.scale)).collect();
                pairs
                    .chunks(pair_batch)
                    .map(|c| c.iter().map(|p| p.0).chain(c.iter().map(|p| p.1)).collect())
                    .collect()
            }
            LossKind::Pointwise => {
                let mut pts = train.datapoints(keep);
                pts.shuffle(&mut ekey.derive_str("order").stream());
                pts.chunks(config.batch).map(<[_]>::to_vec).collect()
            }
        };
        for (b, points) in batches.iter().enumerate() {
            let (maps, classes, scales) = batch_inputs(train, points, book, schedule)?;
            let mut g = Graph::new(&model.layers);
            let out = model.forward(&mut g, maps, &classes, &scales)?;
            let s: Vec<f64> = g.value(out)?.data().iter().map(|&v| v as f64).collect();
            let (loss, grad) = match config.loss {
                LossKind::Pairwise => {
                    let half = s.len() / 2;
                    let (l, dr, dg) = pairwise_loss(&s[..half], &s[half..])?;
                    (l, dr.into_iter().chain(dg).collect::<Vec<_>>())
                }
                LossKind::Pointwise => {
                    let labels: Vec<bool> = points
                        .iter()
                        .map(|dp| train.trajectories[dp.trajectory].label.is_real())
                        .collect();
                    pointwise_loss(&s, &labels)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "scorer loss {loss} at epoch {epoch}, batch {b}"
                )));
            }
            let upstream = Tensor::new(vec![s.len(), 1], grad.iter().map(|&v| v as f32).collect())?;
            let grads = g.backward(out, &upstream)?;
            step += 1;
            adam_update(&mut model.layers, &grads.params, &mut state, lr_at(&lr, step)?, ADAM_BETAS, ADAM_EPS)?;
            let weight = match config.loss {
                LossKind::Pairwise => s.len() / 2,
                LossKind::Pointwise => s.len(),
            };
            loss_sum += loss * weight as f64;
            seen += weight;
        }
        let validation = match validation {
            Some(v) => {
                let mut scored = score_dataset(model, v, book, schedule)?;
                if config.exclude_first_scale {
                    scored.retain(|p| p.scale >= 2);
                }
                Some(scorer_diagnostics(&scored, schedule.len())?)
            }
            None => None,
        };
        let record = ScorerEpoch {
            train_loss: loss_sum / seen.max(1) as f64,
            validation,
        };
        progress(epoch, &record);
        history.push(record);
    }
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Selection {
    Greedy,
    Topk { k_sel: usize },
}

/// Index of the winning candidate. Greedy takes the highest score with the
/// lowest index on ties; top-k draws from a softmax over the `k_sel` best.
pub fn select_candidate(scores: &[f32], selection: Selection, key: StreamKey) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Invariant("no candidates to select from".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    match selection {
        Selection::Greedy => Ok(order[0]),
        Selection::Topk { k_sel } => {
            if k_sel == 0 {
                return Err(Error::out_of_range("k_sel", k_sel, "[1, inf)"));
            }
            order.truncate(k_sel);
            if order.len() == 1 {
                return Ok(order[0]);
            }
            let max = scores[order[0]] as f64;
            let weights: Vec<f64> = order.iter().map(|&i| (scores[i] as f64 - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let u = key.uniform() * total;
            let mut cum = 0.0;
            for (&i, w) in order.iter().zip(&weights) {
                cum += w;
                if u < cum {
                    return Ok(i);
                }
            }
            Ok(*order.last().unwrap())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsrsConfig {
    /// Candidates per scale, `m_1 … m_K`.
    pub counts: Vec<usize>,
    pub selection: Selection,
    /// Skip scoring at scales with a single candidate.
    pub skip_single: bool,
}

impl LsrsConfig {
    /// `m_k = 1` for `k < st`, `m_k = m` otherwise.
    pub fn from_st_m(scales: usize, st: usize, m: usize, selection: Selection) -> Result<Self> {
        if st == 0 || st > scales + 1 {
            return Err(Error::Config {
                key: "lsrs.st".into(),
                constraint: format!("must be in [1, {}]", scales + 1),
            });
        }
        if m == 0 {
            return Err(Error::Config {
                key: "lsrs.m".into(),
                constraint: "must be ≥ 1".into(),
            });
        }
        Ok(LsrsConfig {
            counts: (1..=scales).map(|k| if k < st { 1 } else { m }).collect(),
            selection,
            skip_single: true,
        })
    }

    pub fn validate(&self, scales: usize) -> Result<()> {
        if self.counts.len() != scales || self.counts.contains(&0) {
            return Err(Error::Config {
                key: "lsrs.counts".into(),
                constraint: format!("need {scales} per-scale counts, each ≥ 1"),
            });
        }
        if let Selection::Topk { k_sel: 0 } = self.selection {
            return Err(Error::Config {
                key: "lsrs.k_sel".into(),
                constraint: "must be ≥ 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTrace {
    pub scale: usize,
    /// Empty when scoring was skipped.
    pub scores: Vec<f32>,
    pub chosen: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub scales: Vec<ScaleTrace>,
    pub prior_forwards: usize,
    pub scorer_forwards: usize,
    /// Embed-and-upsample operations.
    pub fusion_ops: usize,
}

impl Trace {
    /// Rows `sample,scale,candidate,score,chosen`.
    pub fn csv_rows(&self, sample: usize, out: &mut String) {
        use std::fmt::Write;
        for s in &self.scales {
            if s.scores.is_empty() {
                let _ = writeln!(out, "{sample},{},0,,1", s.scale);
            }
            for (i, score) in s.scores.iter().enumerate() {
                let _ = writeln!(out, "{sample},{},{i},{score},{}", s.scale, (i == s.chosen) as u8);
            }
        }
    }
}

pub const TRACE_CSV_HEADER: &str = "sample,scale,candidate,score,chosen";

/// Key of candidate `i` at scale `k`. Candidate 0 shares the baseline's key.
pub fn candidate_key(key: StreamKey, k: usize, i: usize) -> StreamKey {
    let base = scale_key(key, k);
    if i == 0 {
        base
    } else {
        base.derive_str("candidate").derive(i as u64)
    }
}

/// Scoring batch size inside generation.
const CANDIDATE_CHUNK: usize = 32;

/// Next-scale generation that draws `m_k` candidate maps from one set of
/// logits, scores each fused candidate and keeps the selected one.
#[allow(clippy::too_many_arguments)]
pub fn lsrs_generate(
    prior: &PriorModel,
    scorer: &ScoringModel,
    class: usize,
    sampler: &SamplerConfig,
    config: &LsrsConfig,
    book: &Codebook,
    schedule: &ScaleSchedule,
    key: StreamKey,
) -> Result<(Generation, Trace)> {
    config.validate(schedule.len())?;
    sampler.validate()?;
    if class >= prior.config.n_classes {
        return Err(Error::UnknownClass(class));
    }
    let (h, w) = schedule.full();
    let mut e = FeatureMap::zeros(h, w, book.channels());
    let mut maps = Vec::with_capacity(schedule.len());
    let mut trace = Trace {
        scales: Vec::with_capacity(schedule.len()),
        prior_forwards: 0,
        scorer_forwards: 0,
        fusion_ops: 0,
    };
    for k in 1..=schedule.len() {
        let (logits, n) = guided_logits(prior, &e, class, k, sampler, schedule)?;
        trace.prior_forwards += n;
        let m = config.counts[k - 1];
        let candidates = (0..m)
            .map(|i| {
                let map = sample_token_map(&logits, k, sampler, candidate_key(key, k, i))?;
                let fused = fuse_incremental(&e, &map, book, schedule)?;
                Ok((map, fused))
            })
            .collect::<Result<Vec<_>>>()?;
        trace.fusion_ops += m;
        let (chosen, scores) = if m == 1 && config.skip_single {
            (0, Vec::new())
        } else {
            let mut scores = Vec::with_capacity(m);
            for chunk in candidates.chunks(CANDIDATE_CHUNK) {
                let items: Vec<(usize, &FeatureMap, usize)> = chunk.iter().map(|c| (class, &c.1, k)).collect();
                scores.extend(scorer.score_batch(&items)?);
            }
            trace.scorer_forwards += m;
            let sel_key = scale_key(key, k).derive_str("select");
            (select_candidate(&scores, config.selection, sel_key)?, scores)
        };
        let (map, fused) = candidates.into_iter().nth(chosen).expect("chosen candidate");
        trace.scales.push(ScaleTrace { scale: k, scores, chosen });
        e = fused;
        maps.push(map);
    }
    let prior_forwards = trace.prior_forwards;
    Ok((
        Generation {
            code: MultiScaleCode { maps },
            image: e,
            prior_forwards,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scorer() -> ScoringModel {
        let config = ScorerConfig {
            n_classes: 2,
            scales: 3,
            channels: 2,
            canvas: 8,
            widths: vec![4, 8],
            feature_channels: 6,
            embed_dim: 5,
            hidden: vec![7],
        };
        ScoringModel::new(config, StreamKey::root(1)).unwrap()
    }

    fn random_map(seed: u64) -> FeatureMap {
        let mut rng = StreamKey::root(seed).stream();
        FeatureMap::new(8, 8, 2, (0..128).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect()).unwrap()
    }

    #[test]
    fn loss_anchors() {
        let (l, _, _) = pairwise_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = pointwise_loss(&[0.0], &[true]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = pointwise_loss(&[-30.0], &[false]).unwrap();
        assert!(l <= 1e-12);
        let (l, _) = pointwise_loss(&[0.0, 0.0], &[true, false]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _, _) = pairwise_loss(&[800.0], &[-800.0]).unwrap();
        assert!(l < 1e-300);
        assert!(pairwise_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn zero_head_scores_zero_and_is_deterministic() {
        let model = tiny_scorer();
        let m = random_map(3);
        assert_eq!(model.score(0, &m, 2).unwrap(), 0.0);
        let mut trained = model.clone();
        trained.layers.last_mut().unwrap().params[0].data_mut()[0] = 0.5;
        let a = trained.score(1, &m, 3).unwrap();
        assert_eq!(a, trained.score(1, &m, 3).unwrap());
        assert_ne!(a, 0.0);
        assert!(model.score(2, &m, 1).is_err());
        assert!(model.score(0, &m, 4).is_err());
    }

    #[test]
    fn batch_scores_match_single_scores() {
        let mut model = tiny_scorer();
        model.layers.last_mut().unwrap().params[0].data_mut().fill(0.3);
        let maps: Vec<FeatureMap> = (0..5).map(random_map).collect();
        let items: Vec<(usize, &FeatureMap, usize)> = maps.iter().enumerate().map(|(i, m)| (i % 2, m, 1 + i % 3)).collect();
        let batch = model.score_batch(&items).unwrap();
        for (it, b) in items.iter().zip(batch) {
            assert_eq!(model.score(it.0, it.1, it.2).unwrap(), b);
        }
    }

    #[test]
    fn standard_scorer_flattens_to_1024() {
        assert_eq!(ScorerConfig::standard(8, 6, 4, 32).flat_features(), 1024);
    }

    #[test]
    fn selection_rules() {
        let k = StreamKey::root(0);
        assert_eq!(select_candidate(&[0.5, 0.5], Selection::Greedy, k).unwrap(), 0);
        assert_eq!(select_candidate(&[0.1, 0.9, 0.9], Selection::Greedy, k).unwrap(), 1);
        for seed in 0..50 {
            let s = [0.3, -2.0, 0.3, 1.7, 0.2];
            assert_eq!(
                select_candidate(&s, Selection::Topk { k_sel: 1 }, StreamKey::root(seed)).unwrap(),
                select_candidate(&s, Selection::Greedy, k).unwrap()
            );
            let pick = select_candidate(&s, Selection::Topk { k_sel: 2 }, StreamKey::root(seed)).unwrap();
            assert!(pick == 3 || pick == 0);
        }
        assert!(select_candidate(&[], Selection::Greedy, k).is_err());
    }

    #[test]
    fn st_m_parameterisation() {
        let c = LsrsConfig::from_st_m(6, 2, 8, Selection::Greedy).unwrap();
        assert_eq!(c.counts, vec![1, 8, 8, 8, 8, 8]);
        assert_eq!(LsrsConfig::from_st_m(6, 7, 8, Selection::Greedy).unwrap().counts, vec![1; 6]);
        assert!(LsrsConfig::from_st_m(6, 0, 8, Selection::Greedy).is_err());
        assert!(LsrsConfig::from_st_m(6, 8, 8, Selection::Greedy).is_err());
    }

    #[test]
    fn scorer_checkpoint_round_trip() {
        let model = tiny_scorer();
        assert_eq!(ScoringModel::from_bytes(&model.to_bytes().unwrap()).unwrap(), model);
    }
}
