//! Metrics and the experiment harness.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsrs::{lsrs_generate, LsrsConfig, ScoringModel, Trace};
use crate::msvq::{fuse, Codebook, MultiScaleCode, ScaleSchedule, TokenMap};
use crate::nn::graph::Graph;
use crate::nn::layer::{Layer, LayerKind, LEAKY_SLOPE, NORM_EPS};
use crate::nn::resize::ResizeKind;
use crate::nn::tensor::FeatureMap;
use crate::prior::{generate_baseline, PriorModel, SamplerConfig};
use crate::rng::StreamKey;
use crate::synth::Checker;

/// Relative tolerance for covariance symmetry.
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    pub mean: Vec<f64>,
    /// Row-major `D×D` unbiased covariance.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FrechetStats {
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Dataset(format!(
                "covariance needs at least 2 samples, got {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("frechet_stats", "ragged or empty feature rows"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(FrechetStats {
            mean,
            cov,
            count: rows.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Enough samples for a full-rank covariance estimate.
    pub fn full_rank_sample(&self) -> bool {
        self.count > self.dim()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }

    fn check(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d * d {
            return Err(Error::shape("frechet_stats", format!("covariance of {} for D = {d}", self.cov.len())));
        }
        let scale = self.cov.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in i + 1..d {
                if (self.cov[i * d + j] - self.cov[j * d + i]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::Invariant(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// are clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetParts {
    pub fid: f64,
    pub mean_diff2: f64,
    /// `Tr(Σ_r) + Tr(Σ_g) − 2·Tr((Σ_r Σ_g)^½)`.
    pub trace_term: f64,
    pub trace_gen: f64,
    pub two_trace_sqrt: f64,
}

pub fn frechet_distance(real: &FrechetStats, generated: &FrechetStats) -> Result<FrechetParts> {
    if real.dim() != generated.dim() {
        return Err(Error::shape(
            "frechet_distance",
            format!("dimension {} vs {}", real.dim(), generated.dim()),
        ));
    }
    real.check()?;
    generated.check()?;
    let mean_diff2: f64 = real.mean.iter().zip(&generated.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let sr = real.matrix();
    let sg = generated.matrix();
    let root_r = psd_sqrt(&sr);
    let inner = &root_r * &sg * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let trace_gen = sg.trace();
    let trace_term = (sr.trace() + trace_gen - 2.0 * tr_sqrt).max(0.0);
    Ok(FrechetParts {
        fid: mean_diff2 + trace_term,
        mean_diff2,
        trace_term,
        trace_gen,
        two_trace_sqrt: 2.0 * tr_sqrt,
    })
}

pub const FEATURE_DIM: usize = 16;

const X_ACT: usize = 0;
const X_STEM: usize = 1;
const X_BLOCK: usize = 2;
const X_BLOCK_LAYERS: usize = 5;
const X_HEAD: usize = X_BLOCK + 2 * X_BLOCK_LAYERS;

/// Untrained convolutional feature map with fixed random weights.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    pub channels: usize,
    layers: Vec<Layer>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::out_of_range("channels", channels, "[1, inf)"));
        }
        let mut rng = StreamKey::root(seed).derive_str("feature-extractor").stream();
        let w = FEATURE_DIM;
        let mut layers = vec![
            Layer::new("act", LayerKind::LeakyRelu { slope: LEAKY_SLOPE }, vec![])?,
            Layer::init("stem", LayerKind::Conv3x3 { inputs: channels, outputs: w }, 1.0, &mut rng),
        ];
        for b in 0..2 {
            let name = |n: &str| format!("block{b}.{n}");
            layers.push(Layer::init(name("conv_a"), LayerKind::Conv3x3 { inputs: w, outputs: w }, 1.0, &mut rng));
            layers.push(Layer::init(name("norm_a"), LayerKind::ChannelNorm { channels: w, eps: NORM_EPS }, 1.0, &mut rng));
            layers.push(Layer::init(name("conv_b"), LayerKind::Conv3x3 { inputs: w, outputs: w }, 1.0, &mut rng));
            layers.push(Layer::init(name("norm_b"), LayerKind::ChannelNorm { channels: w, eps: NORM_EPS }, 1.0, &mut rng));
            layers.push(Layer::init(name("proj"), LayerKind::Conv1x1 { inputs: w, outputs: w }, 1.0, &mut rng));
        }
        layers.push(Layer::init("head", LayerKind::Conv1x1 { inputs: w, outputs: w }, 1.0, &mut rng));
        Ok(FeatureExtractor { seed, channels, layers })
    }

    fn features(&self, maps: &[&FeatureMap]) -> Result<Vec<Vec<f64>>> {
        let n = maps.len();
        let mut g = Graph::inference(&self.layers);
        let x = g.input(FeatureMap::stack(maps)?);
        let mut h = g.chain(&[X_STEM, X_ACT], x)?;
        for b in 0..2 {
            if b == 1 {
                let (hh, ww) = (maps[0].height() / 2, maps[0].width() / 2);
                h = g.resize(h, hh.max(1), ww.max(1), ResizeKind::Area)?;
            }
            let base = X_BLOCK + X_BLOCK_LAYERS * b;
            let r = g.chain(&[base, base + 1, X_ACT, base + 2, base + 3, X_ACT, base + 4], h)?;
            h = g.add(h, r)?;
        }
        let h = g.chain(&[X_HEAD, X_ACT], h)?;
        let pooled = g.resize(h, 1, 1, ResizeKind::Area)?;
        let flat = g.reshape(pooled, &[n, FEATURE_DIM])?;
        Ok(g.value(flat)?
            .data()
            .chunks(FEATURE_DIM)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect())
    }
}

const EXTRACT_CHUNK: usize = 64;

/// Feature rows and their Fréchet statistics (unbiased covariance).
pub fn extract_features(extractor: &FeatureExtractor, images: &[&FeatureMap]) -> Result<(Vec<Vec<f64>>, FrechetStats)> {
    if images.len() < 2 {
        return Err(Error::Dataset(format!(
            "feature statistics need at least 2 images, got {}",
            images.len()
        )));
    }
    if let Some(m) = images.iter().find(|m| m.channels() != extractor.channels) {
        return Err(Error::shape(
            "feature_extractor",
            format!("{} channels, expected {}", m.channels(), extractor.channels),
        ));
    }
    let chunks = images
        .par_chunks(EXTRACT_CHUNK)
        .map(|c| extractor.features(c))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = chunks.into_iter().flatten().collect();
    let stats = FrechetStats::from_features(&rows)?;
    Ok((rows, stats))
}

/// Mean pairwise Euclidean distance between feature rows.
pub fn diversity(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::Dataset("diversity needs at least 2 samples".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            sum += d2.sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPoint {
    pub class: usize,
    pub scale: usize,
    pub real: bool,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleDiagnostics {
    pub scale: usize,
    /// `None` when the scale lacks one of the labels.
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub mean_real: Option<f64>,
    pub mean_generated: Option<f64>,
    pub n_real: usize,
    pub n_generated: usize,
}

pub const HISTOGRAM_BINS: usize = 64;
const HISTOGRAM_SMOOTHING: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerDiagnostics {
    pub per_scale: Vec<ScaleDiagnostics>,
    /// Mean real score minus mean generated score over all points.
    pub mean_gap: f64,
    /// `KL(generated ‖ real)` between smoothed score histograms.
    pub divergence: f64,
    pub histogram_range: (f64, f64),
    pub histogram_real: Vec<f64>,
    pub histogram_generated: Vec<f64>,
}

impl ScorerDiagnostics {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.per_scale.get(k - 1).and_then(|s| s.accuracy)
    }
}

fn log_sigmoid_loss(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

fn normalized_histogram(scores: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut h = vec![0.0; HISTOGRAM_BINS];
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    for &s in scores {
        let b = (((s - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        h[b] += 1.0;
    }
    let total = scores.len().max(1) as f64;
    let smoothed: Vec<f64> = h.iter().map(|c| c / total + HISTOGRAM_SMOOTHING).collect();
    let z: f64 = smoothed.iter().sum();
    smoothed.into_iter().map(|p| p / z).collect()
}

/// Per-scale ranking accuracy and pairwise loss over every (real, generated)
/// pair sharing class and scale, plus score-distribution statistics.
pub fn scorer_diagnostics(points: &[ScoredPoint], scales: usize) -> Result<ScorerDiagnostics> {
    if points.is_empty() {
        return Err(Error::Dataset("no scored points".into()));
    }
    let n_classes = points.iter().map(|p| p.class).max().unwrap() + 1;
    let mut groups = vec![vec![(Vec::new(), Vec::new()); n_classes]; scales];
    for p in points {
        if p.scale == 0 || p.scale > scales {
            return Err(Error::out_of_range("scale", p.scale, format!("[1, {scales}]")));
        }
        let g = &mut groups[p.scale - 1][p.class];
        if p.real {
            g.0.push(p.score);
        } else {
            g.1.push(p.score);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let per_scale = groups
        .iter()
        .enumerate()
        .map(|(k, per_class)| {
            let (mut wins, mut loss, mut pairs) = (0.0, 0.0, 0usize);
            let mut reals = Vec::new();
            let mut gens = Vec::new();
            for (r, g) in per_class {
                for &a in r {
                    for &b in g {
                        wins += if a > b {
                            1.0
                        } else if a == b {
                            0.5
                        } else {
                            0.0
                        };
                        loss += log_sigmoid_loss(a - b);
                        pairs += 1;
                    }
                }
                reals.extend_from_slice(r);
                gens.extend_from_slice(g);
            }
            ScaleDiagnostics {
                scale: k + 1,
                accuracy: (pairs > 0).then(|| wins / pairs as f64),
                loss: (pairs > 0).then(|| loss / pairs as f64),
                mean_real: mean(&reals),
                mean_generated: mean(&gens),
                n_real: reals.len(),
                n_generated: gens.len(),
            }
        })
        .collect();
    let real: Vec<f64> = points.iter().filter(|p| p.real).map(|p| p.score).collect();
    let gen: Vec<f64> = points.iter().filter(|p| !p.real).map(|p| p.score).collect();
    let lo = points.iter().map(|p| p.score).fold(f64::INFINITY, f64::min);
    let mut hi = points.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let hist_real = normalized_histogram(&real, lo, hi);
    let hist_gen = normalized_histogram(&gen, lo, hi);
    let divergence = hist_gen.iter().zip(&hist_real).map(|(p, q)| p * (p / q).ln()).sum();
    Ok(ScorerDiagnostics {
        per_scale,
        mean_gap: mean(&real).unwrap_or(0.0) - mean(&gen).unwrap_or(0.0),
        divergence,
        histogram_range: (lo, hi),
        histogram_real: hist_real,
        histogram_generated: hist_gen,
    })
}

/// Copy of `code` whose scale `k` holds uniformly random ids.
pub fn replace_scale(code: &MultiScaleCode, k: usize, vocab: usize, key: StreamKey) -> MultiScaleCode {
    let mut out = code.clone();
    let map = &code.maps[k - 1];
    let mut rng = key.stream();
    let ids = (0..map.ids.len()).map(|_| rng.below(vocab) as u16).collect();
    out.maps[k - 1] = TokenMap { ids, ..map.clone() };
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub samples: usize,
    pub base_violation: f64,
    /// Mean violation increase when scale `k` is replaced, index `k − 1`.
    pub deltas: Vec<f64>,
}

/// Replace one scale at a time with random ids, re-fuse and measure the
/// mean increase of the structural violation.
pub fn scale_replacement_ablation(
    codes: &[(usize, MultiScaleCode)],
    book: &Codebook,
    schedule: &ScaleSchedule,
    checker: &Checker,
    key: StreamKey,
) -> Result<AblationReport> {
    if codes.is_empty() {
        return Err(Error::Dataset("ablation needs at least one code".into()));
    }
    let per_sample = codes
        .par_iter()
        .enumerate()
        .map(|(i, (class, code))| {
            let base = checker.violation(&fuse(code, book, schedule)?, *class)?;
            let deltas = (1..=schedule.len())
                .map(|k| {
                    let rk = key.derive(i as u64).derive(k as u64);
                    let swapped = replace_scale(code, k, book.size(), rk);
                    Ok(checker.violation(&fuse(&swapped, book, schedule)?, *class)? - base)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((base, deltas))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let mut deltas = vec![0.0; schedule.len()];
    let mut base = 0.0;
    for (b, d) in &per_sample {
        base += b;
        for (acc, v) in deltas.iter_mut().zip(d) {
            *acc += v;
        }
    }
    deltas.iter_mut().for_each(|d| *d /= n);
    Ok(AblationReport {
        samples: per_sample.len(),
        base_violation: base / n,
        deltas,
    })
}

/// Everything generation and scoring of a sweep needs.
pub struct EvalStack<'a> {
    pub prior: &'a PriorModel,
    pub book: &'a Codebook,
    pub schedule: &'a ScaleSchedule,
    pub checker: &'a Checker,
    pub extractor: &'a FeatureExtractor,
    pub real_stats: &'a FrechetStats,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug)]
pub enum Generator<'a> {
    Baseline,
    Lsrs {
        scorer: &'a ScoringModel,
        config: LsrsConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub frechet: FrechetParts,
    pub validity: f64,
    pub diversity: f64,
    pub prior_forwards: u64,
    pub scorer_forwards: u64,
    pub fusion_ops: u64,
    pub wall_ms_per_image: f64,
}

/// Key pool for evaluation samples, disjoint from every training pool.
pub fn eval_pool_key(root: StreamKey, seed: u64) -> StreamKey {
    root.derive_str("eval-pool").derive(seed)
}

pub struct GeneratedSet {
    pub classes: Vec<usize>,
    pub images: Vec<FeatureMap>,
    pub codes: Vec<MultiScaleCode>,
    pub traces: Vec<Option<Trace>>,
    pub wall_ms: f64,
}

/// `n` samples with classes assigned round-robin; sample `i` uses
/// `pool.derive(i)`.
pub fn generate_set(stack: &EvalStack, generator: &Generator, n: usize, pool: StreamKey) -> Result<GeneratedSet> {
    let n_classes = stack.prior.config.n_classes;
    let start = Instant::now();
    let out = (0..n)
        .into_par_iter()
        .map(|i| {
            let class = i % n_classes;
            let key = pool.derive(i as u64);
            match generator {
                Generator::Baseline => {
                    let g = generate_baseline(stack.prior, class, &stack.sampler, stack.book, stack.schedule, key)?;
                    Ok((class, g, None))
                }
                Generator::Lsrs { scorer, config } => {
                    let (g, t) = lsrs_generate(
                        stack.prior,
                        scorer,
                        class,
                        &stack.sampler,
                        config,
                        stack.book,
                        stack.schedule,
                        key,
                    )?;
                    Ok((class, g, Some(t)))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut set = GeneratedSet {
        classes: Vec::with_capacity(n),
        images: Vec::with_capacity(n),
        codes: Vec::with_capacity(n),
        traces: Vec::with_capacity(n),
        wall_ms,
    };
    for (c, g, t) in out {
        set.classes.push(c);
        set.images.push(g.image);
        set.codes.push(g.code);
        set.traces.push(t);
    }
    Ok(set)
}

pub fn evaluate_generator(stack: &EvalStack, generator: &Generator, n: usize, pool: StreamKey) -> Result<MetricsReport> {
    let set = generate_set(stack, generator, n, pool)?;
    let refs: Vec<&FeatureMap> = set.images.iter().collect();
    let (rows, stats) = extract_features(stack.extractor, &refs)?;
    let valid = set
        .images
        .par_iter()
        .zip(&set.classes)
        .map(|(img, &c)| Ok(stack.checker.check_validity(img, c)?.0))
        .collect::<Result<Vec<bool>>>()?;
    let n_valid = valid.iter().filter(|&&v| v).count();
    let (mut prior_f, mut scorer_f, mut fusion) = (0u64, 0u64, 0u64);
    for t in &set.traces {
        match t {
            Some(t) => {
                prior_f += t.prior_forwards as u64;
                scorer_f += t.scorer_forwards as u64;
                fusion += t.fusion_ops as u64;
            }
            None => {
                let per = if stack.sampler.cfg_scale != 0.0 { 2 } else { 1 };
                prior_f += (per * stack.schedule.len()) as u64;
                fusion += stack.schedule.len() as u64;
            }
        }
    }
    Ok(MetricsReport {
        samples: n,
        frechet: frechet_distance(stack.real_stats, &stats)?,
        validity: n_valid as f64 / n as f64,
        diversity: diversity(&rows)?,
        prior_forwards: prior_f,
        scorer_forwards: scorer_f,
        fusion_ops: fusion,
        wall_ms_per_image: set.wall_ms / n as f64,
    })
}

#[derive(Clone, Debug)]
pub struct SweepPoint<'a> {
    pub value: String,
    pub generator: Generator<'a>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// One row per grid point per seed. Each seed draws from its own evaluation
/// pool, shared across grid points.
pub fn run_sweep(
    stack: &EvalStack,
    points: &[SweepPoint],
    n_samples: usize,
    seeds: &[u64],
    root: StreamKey,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(points.len() * seeds.len());
    for p in points {
        for &seed in seeds {
            let report = evaluate_generator(stack, &p.generator, n_samples, eval_pool_key(root, seed))?;
            rows.push(SweepRow {
                value: p.value.clone(),
                seed,
                report,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_METRIC_COLUMNS: &str = "seed,fid,mean_diff2,trace_term,validity,diversity,scorer_fwds,prior_fwds";

/// Deterministic metrics table. Wall-clock lives in [`sweep_timing_csv`] so
/// this file replays byte-identically.
pub fn sweep_csv(axis: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{axis},{SWEEP_METRIC_COLUMNS}\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.value,
            r.seed,
            m.frechet.fid,
            m.frechet.mean_diff2,
            m.frechet.trace_term,
            m.validity,
            m.diversity,
            m.scorer_forwards,
            m.prior_forwards
        );
    }
    s
}

pub fn sweep_timing_csv(axis: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{axis},seed,wall_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.value, r.seed, r.report.wall_ms_per_image);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: String,
    pub fid: MeanStd,
    pub validity: MeanStd,
    pub diversity: MeanStd,
    pub wall_ms_per_image: MeanStd,
}

/// Mean ± sample standard deviation across seeds, in grid order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.value.as_str()) {
            order.push(&r.value);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let sel: Vec<&MetricsReport> = rows.iter().filter(|r| r.value == v).map(|r| &r.report).collect();
            let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&sel.iter().map(|m| f(m)).collect::<Vec<_>>());
            SweepSummary {
                value: v.to_string(),
                fid: col(|m| m.frechet.fid),
                validity: col(|m| m.validity),
                diversity: col(|m| m.diversity),
                wall_ms_per_image: col(|m| m.wall_ms_per_image),
            }
        })
        .collect()
}

/// Line plot of one metric's mean with ±1 std whiskers across grid points.
pub fn line_plot_svg(title: &str, labels: &[String], values: &[MeanStd]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let lo = values.iter().map(|v| v.mean - v.std).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|v| v.mean + v.std).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let n = values.len().max(2) as f64 - 1.0;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"20\">{title}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"4\" y=\"{}\">{hi:.4}</text>\n<text x=\"4\" y=\"{}\">{lo:.4}</text>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad,
        pad + 4.0,
        h - pad,
    );
    let pts: Vec<String> = values.iter().enumerate().map(|(i, v)| format!("{:.2},{:.2}", x(i), y(v.mean))).collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
    for (i, (v, label)) in values.iter().zip(labels).enumerate() {
        let _ = writeln!(
            s,
            "<line x1=\"{0:.2}\" y1=\"{1:.2}\" x2=\"{0:.2}\" y2=\"{2:.2}\" stroke=\"steelblue\"/>\n\
             <circle cx=\"{0:.2}\" cy=\"{3:.2}\" r=\"3\" fill=\"steelblue\"/>\n\
             <text x=\"{0:.2}\" y=\"{4:.2}\" text-anchor=\"middle\">{label}</text>",
            x(i),
            y(v.mean - v.std),
            y(v.mean + v.std),
            y(v.mean),
            h - pad + 16.0,
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeRow {
    pub m: usize,
    pub images: usize,
    pub prior_forwards_per_image: f64,
    pub scorer_forwards_per_image: f64,
    pub fusion_ops_per_image: f64,
    pub wall_ms_per_image: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeReport {
    pub rows: Vec<ComputeRow>,
    /// Affine fit `wall_ms = intercept + slope·M`.
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`, returning (intercept, slope, R²).
pub fn affine_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (intercept, slope, r2)
}

/// Counter totals per M. Fails when the per-image prior-forward count
/// differs between any two runs.
pub fn compute_report(runs: &[(usize, Vec<Trace>, f64)]) -> Result<ComputeReport> {
    if runs.is_empty() || runs.iter().any(|r| r.1.is_empty()) {
        return Err(Error::Dataset("compute report needs traces for every M".into()));
    }
    let mut rows = Vec::with_capacity(runs.len());
    let mut prior_count: Option<usize> = None;
    for (m, traces, wall_ms) in runs {
        for t in traces {
            match prior_count {
                None => prior_count = Some(t.prior_forwards),
                Some(p) if p != t.prior_forwards => {
                    return Err(Error::Invariant(format!(
                        "prior forwards {} at M = {m} differ from {p}",
                        t.prior_forwards
                    )))
                }
                _ => {}
            }
        }
        let n = traces.len() as f64;
        let total = |f: fn(&Trace) -> usize| traces.iter().map(f).sum::<usize>() as f64 / n;
        rows.push(ComputeRow {
            m: *m,
            images: traces.len(),
            prior_forwards_per_image: total(|t| t.prior_forwards),
            scorer_forwards_per_image: total(|t| t.scorer_forwards),
            fusion_ops_per_image: total(|t| t.fusion_ops),
            wall_ms_per_image: wall_ms / n,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.wall_ms_per_image).collect();
    let (intercept, slope, r2) = affine_fit(&x, &y);
    Ok(ComputeReport {
        rows,
        intercept,
        slope,
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_1d(mean: f64, var: f64) -> FrechetStats {
        FrechetStats {
            mean: vec![mean],
            cov: vec![var],
            count: 10,
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        let p = frechet_distance(&stats_1d(1.0, 4.0), &stats_1d(-0.5, 0.25)).unwrap();
        assert!((p.fid - (1.5f64.powi(2) + 1.5f64.powi(2))).abs() < 1e-9);
        assert!((p.fid - p.mean_diff2 - p.trace_term).abs() <= 1e-12);
    }

    #[test]
    fn identical_stats_have_zero_distance() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64, 1.0]).collect();
        let s = FrechetStats::from_features(&rows).unwrap();
        assert!(frechet_distance(&s, &s).unwrap().fid <= 1e-6);
    }

    #[test]
    fn asymmetric_covariance_is_rejected() {
        let s = FrechetStats {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.5, 0.2, 1.0],
            count: 5,
        };
        assert!(frechet_distance(&s, &s).is_err());
    }

    #[test]
    fn zero_head_diagnostics_are_ties() {
        let pts: Vec<ScoredPoint> = (0..40)
            .map(|i| ScoredPoint {
                class: i % 2,
                scale: 1 + i % 3,
                real: i % 4 < 2,
                score: 0.0,
            })
            .collect();
        let d = scorer_diagnostics(&pts, 3).unwrap();
        for s in &d.per_scale {
            assert_eq!(s.accuracy, Some(0.5));
            assert!((s.loss.unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
        assert!(d.divergence.abs() < 1e-9);
    }

    #[test]
    fn separated_scores_are_perfect() {
        let pts: Vec<ScoredPoint> = (0..40)
            .map(|i| ScoredPoint {
                class: 0,
                scale: 1,
                real: i % 2 == 0,
                score: if i % 2 == 0 { 3.0 + i as f64 * 0.01 } else { -3.0 },
            })
            .collect();
        let d = scorer_diagnostics(&pts, 2).unwrap();
        assert_eq!(d.accuracy(1), Some(1.0));
        assert_eq!(d.accuracy(2), None);
        assert!(d.divergence > 5.0);
    }

    #[test]
    fn affine_fit_recovers_line() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 + 0.5 * v).collect();
        let (a, b, r2) = affine_fit(&x, &y);
        assert!((a - 3.0).abs() < 1e-12 && (b - 0.5).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_positive_on_distinct_rows() {
        assert!(diversity(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap() == 5.0);
        assert!(diversity(&[vec![1.0]]).is_err());
    }
}
