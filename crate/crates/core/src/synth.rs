//! Procedural class-conditional feature maps and their structural-validity
//! checker.
//!
//! Every class renders a one-channel pattern `background + amplitude · t`,
//! where `t ∈ [0, 1]` is an anti-aliased shape controlled by a few geometric
//! parameters. The render gets Gaussian noise and is lifted to `C` channels
//! along a fixed unit vector. The checker projects back onto that vector,
//! pools to a coarse grid, and brute-forces the class's parameter grid, fitting amplitude
//! and background in closed form for each template.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::tensor::FeatureMap;
use crate::rng::StreamKey;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    Ring,
    Disk,
    Cross,
    VStripes,
    HStripes,
    Checkerboard,
    Frame,
    TwoDisks,
}

impl PatternKind {
    pub const ALL: [PatternKind; 8] = [
        PatternKind::Ring,
        PatternKind::Disk,
        PatternKind::Cross,
        PatternKind::VStripes,
        PatternKind::HStripes,
        PatternKind::Checkerboard,
        PatternKind::Frame,
        PatternKind::TwoDisks,
    ];
}

const RING_THICKNESS: f64 = 3.0;
const CROSS_HALF_WIDTH: f64 = 2.5;
const FRAME_THICKNESS: f64 = 3.0;
const TWO_DISK_RADIUS: f64 = 4.5;

/// One free parameter: uniform range for generation and an evenly spaced
/// grid for checking. Periodic parameters are fractions in `[0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    pub periodic: bool,
}

impl ParamRange {
    fn linear(name: &str, lo: f64, hi: f64, steps: usize) -> Self {
        ParamRange {
            name: name.into(),
            lo,
            hi,
            steps,
            periodic: false,
        }
    }

    fn phase(name: &str, steps: usize) -> Self {
        ParamRange {
            name: name.into(),
            lo: 0.0,
            hi: 1.0,
            steps,
            periodic: true,
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        if self.periodic {
            (0..self.steps)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / self.steps as f64)
                .collect()
        } else if self.steps == 1 {
            vec![0.5 * (self.lo + self.hi)]
        } else {
            (0..self.steps)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.steps - 1) as f64)
                .collect()
        }
    }

    pub fn center(&self) -> f64 {
        if self.periodic {
            self.lo
        } else {
            0.5 * (self.lo + self.hi)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub kind: PatternKind,
    pub params: Vec<ParamRange>,
    pub amplitude: (f64, f64),
    pub background: (f64, f64),
}

impl ClassSpec {
    /// Desk parameter ranges for a 32×32 canvas, scaled for other sizes.
    pub fn standard(id: usize, kind: PatternKind, canvas: usize) -> Self {
        let s = canvas as f64 / 32.0;
        let p = |name: &str, lo: f64, hi: f64, steps: usize| ParamRange::linear(name, lo * s, hi * s, steps);
        let params = match kind {
            PatternKind::Ring => vec![p("cx", 13.0, 19.0, 13), p("cy", 13.0, 19.0, 13), p("radius", 8.0, 11.0, 7)],
            PatternKind::Disk => vec![p("cx", 12.0, 20.0, 17), p("cy", 12.0, 20.0, 17), p("radius", 6.0, 10.0, 9)],
            PatternKind::Cross => vec![p("cx", 12.0, 20.0, 17), p("cy", 12.0, 20.0, 17), p("arm", 9.0, 13.0, 9)],
            PatternKind::VStripes | PatternKind::HStripes => {
                vec![p("period", 12.0, 18.0, 25), ParamRange::phase("phase", 24)]
            }
            PatternKind::Checkerboard => vec![
                p("cell", 8.0, 12.0, 17),
                ParamRange::phase("phase_x", 16),
                ParamRange::phase("phase_y", 16),
            ],
            PatternKind::Frame => vec![p("cx", 13.0, 19.0, 13), p("cy", 13.0, 19.0, 13), p("half", 8.0, 12.0, 9)],
            PatternKind::TwoDisks => vec![p("cx", 14.0, 18.0, 9), p("cy", 12.0, 20.0, 17), p("separation", 14.0, 18.0, 9)],
        };
        ClassSpec {
            id,
            kind,
            params,
            amplitude: (0.6, 1.0),
            background: (0.0, 0.2),
        }
    }

    pub fn validate(&self, canvas: usize) -> Result<()> {
        let c = canvas as f64;
        for p in &self.params {
            if !(p.lo <= p.hi) || p.steps == 0 {
                return Err(Error::Config {
                    key: format!("world.class[{}].{}", self.id, p.name),
                    constraint: "range must be nonempty with at least one grid step".into(),
                });
            }
            if !p.periodic && (p.lo < 0.0 || p.hi > c) {
                return Err(Error::Config {
                    key: format!("world.class[{}].{}", self.id, p.name),
                    constraint: format!("range must lie inside the {canvas}-pixel canvas"),
                });
            }
        }
        Ok(())
    }
}

/// Parameters of one rendered sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleParams {
    pub shape: Vec<f64>,
    pub amplitude: f64,
    pub background: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub class: usize,
    pub image: FeatureMap,
    pub params: SampleParams,
}

fn coverage(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

fn sd_box(px: f64, py: f64, hx: f64, hy: f64) -> f64 {
    let qx = px.abs() - hx;
    let qy = py.abs() - hy;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

/// Unit-amplitude shape value at pixel centre `(x, y)`.
fn shape_value(kind: PatternKind, p: &[f64], x: f64, y: f64) -> f64 {
    use std::f64::consts::PI;
    match kind {
        PatternKind::Ring => {
            let d = ((x - p[0]).powi(2) + (y - p[1]).powi(2)).sqrt();
            coverage((d - p[2]).abs() - 0.5 * RING_THICKNESS)
        }
        PatternKind::Disk => {
            let d = ((x - p[0]).powi(2) + (y - p[1]).powi(2)).sqrt();
            coverage(d - p[2])
        }
        PatternKind::Cross => {
            let (dx, dy) = (x - p[0], y - p[1]);
            let h = sd_box(dx, dy, p[2], CROSS_HALF_WIDTH);
            let v = sd_box(dx, dy, CROSS_HALF_WIDTH, p[2]);
            coverage(h.min(v))
        }
        PatternKind::VStripes => 0.5 * (1.0 + (2.0 * PI * (x / p[0] - p[1])).cos()),
        PatternKind::HStripes => 0.5 * (1.0 + (2.0 * PI * (y / p[0] - p[1])).cos()),
        PatternKind::Checkerboard => {
            let cx = (2.0 * PI * (x / (2.0 * p[0]) - p[1])).cos();
            let cy = (2.0 * PI * (y / (2.0 * p[0]) - p[2])).cos();
            0.5 * (1.0 + cx * cy)
        }
        PatternKind::Frame => {
            let m = (x - p[0]).abs().max((y - p[1]).abs());
            coverage((m - p[2]).abs() - 0.5 * FRAME_THICKNESS)
        }
        PatternKind::TwoDisks => {
            let half = 0.5 * p[2];
            let d1 = ((x - p[0] + half).powi(2) + (y - p[1]).powi(2)).sqrt();
            let d2 = ((x - p[0] - half).powi(2) + (y - p[1]).powi(2)).sqrt();
            coverage(d1.min(d2) - TWO_DISK_RADIUS)
        }
    }
}

/// Unit-amplitude template on a `canvas × canvas` grid.
pub fn render_shape(kind: PatternKind, params: &[f64], canvas: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(canvas * canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            out.push(shape_value(kind, params, x as f64 + 0.5, y as f64 + 0.5) as f32);
        }
    }
    out
}

/// The synthetic world: canvas, channel lift and class specs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub canvas: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    /// Side of the pooled grid the checker compares on.
    pub check_resolution: usize,
    pub classes: Vec<ClassSpec>,
}

impl World {
    /// The first `n_classes` standard classes.
    pub fn standard(n_classes: usize, canvas: usize, channels: usize) -> Result<Self> {
        if n_classes == 0 || n_classes > PatternKind::ALL.len() {
            return Err(Error::Config {
                key: "world.classes".into(),
                constraint: format!("must be in [1, {}]", PatternKind::ALL.len()),
            });
        }
        if canvas < 4 || channels == 0 || canvas % 8.min(canvas) != 0 {
            return Err(Error::Config {
                key: "world.canvas".into(),
                constraint: "canvas ≥ 4, a multiple of 8 when above 8, and channels ≥ 1".into(),
            });
        }
        let world = World {
            canvas,
            channels,
            noise_sigma: 0.02,
            check_resolution: 8.min(canvas),
            classes: PatternKind::ALL[..n_classes]
                .iter()
                .enumerate()
                .map(|(i, &k)| ClassSpec::standard(i, k, canvas))
                .collect(),
        };
        for c in &world.classes {
            c.validate(canvas)?;
        }
        Ok(world)
    }

    /// Checks a deserialized or hand-edited world.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, constraint: &str| {
            Err(Error::Config {
                key: format!("world.{key}"),
                constraint: constraint.into(),
            })
        };
        if self.classes.is_empty() || self.canvas == 0 || self.channels == 0 {
            return bad("classes", "need at least one class, a canvas and a channel");
        }
        if self.check_resolution == 0 || self.canvas % self.check_resolution != 0 {
            return bad("check_resolution", "must divide the canvas");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be finite and ≥ 0");
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return bad("classes", "class ids must equal their position");
            }
            c.validate(self.canvas)?;
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn spec(&self, class: usize) -> Result<&ClassSpec> {
        self.classes.get(class).ok_or(Error::UnknownClass(class))
    }

    /// Per-channel weight of the lift; the unit vector `1/√C`.
    pub fn lift_weight(&self) -> f32 {
        1.0 / (self.channels as f32).sqrt()
    }

    fn lift(&self, plane: &[f32]) -> FeatureMap {
        let w = self.lift_weight();
        let mut data = Vec::with_capacity(plane.len() * self.channels);
        for &v in plane {
            data.extend(std::iter::repeat_n(v * w, self.channels));
        }
        FeatureMap::new(self.canvas, self.canvas, self.channels, data).expect("shape")
    }

    /// One-channel view of a lifted map.
    pub fn project(&self, map: &FeatureMap) -> Vec<f32> {
        let w = self.lift_weight();
        map.data()
            .chunks_exact(self.channels)
            .map(|site| site.iter().sum::<f32>() * w)
            .collect()
    }

    /// Render with explicit parameters; `noise` seeds the pixel noise.
    pub fn render(&self, class: usize, params: &SampleParams, noise: Option<StreamKey>) -> Result<FeatureMap> {
        let spec = self.spec(class)?;
        let shape = render_shape(spec.kind, &params.shape, self.canvas);
        let (a, b) = (params.amplitude as f32, params.background as f32);
        let mut plane: Vec<f32> = shape.iter().map(|&t| b + a * t).collect();
        if let Some(key) = noise {
            if self.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, self.noise_sigma).expect("sigma");
                let mut rng = key.stream();
                for v in &mut plane {
                    *v += normal.sample(&mut rng) as f32;
                }
            }
        }
        Ok(self.lift(&plane))
    }

    pub fn generate_sample(&self, class: usize, key: StreamKey) -> Result<SyntheticSample> {
        let spec = self.spec(class)?;
        let mut rng = key.derive_str("params").stream();
        let shape = spec.params.iter().map(|p| rng.uniform_in(p.lo, p.hi)).collect();
        let params = SampleParams {
            shape,
            amplitude: rng.uniform_in(spec.amplitude.0, spec.amplitude.1),
            background: rng.uniform_in(spec.background.0, spec.background.1),
        };
        let image = self.render(class, &params, Some(key.derive_str("noise")))?;
        Ok(SyntheticSample { class, image, params })
    }

    /// Parameters at the centre of every range.
    pub fn center_params(&self, class: usize) -> Result<SampleParams> {
        let spec = self.spec(class)?;
        Ok(SampleParams {
            shape: spec.params.iter().map(ParamRange::center).collect(),
            amplitude: 0.5 * (spec.amplitude.0 + spec.amplitude.1),
            background: 0.5 * (spec.background.0 + spec.background.1),
        })
    }
}

/// Fit box for amplitude and background, slightly wider than generation.
const FIT_AMPLITUDE: (f64, f64) = (0.5, 1.1);
const FIT_BACKGROUND: (f64, f64) = (-0.05, 0.25);

struct Template {
    values: Vec<f32>,
    sum: f64,
    sum_sq: f64,
}

/// Brute-force template matcher with per-class thresholds.
pub struct Checker {
    world: World,
    pooled_side: usize,
    templates: Vec<Vec<Template>>,
    thresholds: Vec<f64>,
}

/// Box-average a `side × side` plane down to `out × out`.
fn pool(plane: &[f32], side: usize, out: usize) -> Vec<f32> {
    let f = side / out;
    let norm = 1.0 / (f * f) as f64;
    let mut pooled = Vec::with_capacity(out * out);
    for y in 0..out {
        for x in 0..out {
            let mut acc = 0.0f64;
            for dy in 0..f {
                let row = (y * f + dy) * side + x * f;
                acc += plane[row..row + f].iter().map(|&v| v as f64).sum::<f64>();
            }
            pooled.push((acc * norm) as f32);
        }
    }
    pooled
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for j in 0..8 {
            acc[j] += a[i * 8 + j] as f64 * b[i * 8 + j] as f64;
        }
    }
    let mut total: f64 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        total += a[i] as f64 * b[i] as f64;
    }
    total
}

/// `min ‖x − a·t − b·1‖²` over the fit box, from sufficient statistics.
fn box_residual(sx: f64, sxx: f64, sxt: f64, st: f64, stt: f64, n: f64) -> f64 {
    let q = |a: f64, b: f64| sxx - 2.0 * a * sxt - 2.0 * b * sx + a * a * stt + 2.0 * a * b * st + n * b * b;
    let (a0, a1) = FIT_AMPLITUDE;
    let (b0, b1) = FIT_BACKGROUND;
    let det = stt * n - st * st;
    if det > 1e-12 {
        let a = (sxt * n - st * sx) / det;
        let b = (stt * sx - st * sxt) / det;
        if (a0..=a1).contains(&a) && (b0..=b1).contains(&b) {
            return q(a, b).max(0.0);
        }
    }
    let mut best = f64::INFINITY;
    for a in [a0, a1] {
        let b = ((sx - a * st) / n).clamp(b0, b1);
        best = best.min(q(a, b));
    }
    if stt > 0.0 {
        for b in [b0, b1] {
            let a = ((sxt - b * st) / stt).clamp(a0, a1);
            best = best.min(q(a, b));
        }
    }
    best.max(0.0)
}

fn grid_points(spec: &ClassSpec) -> Vec<Vec<f64>> {
    let mut points = vec![vec![]];
    for p in &spec.params {
        let grid = p.grid();
        points = points
            .into_iter()
            .flat_map(|prefix| {
                grid.iter().map(move |&g| {
                    let mut v = prefix.clone();
                    v.push(g);
                    v
                })
            })
            .collect();
    }
    points
}

impl Checker {
    /// Build templates; thresholds start at zero until calibrated or set.
    pub fn new(world: &World) -> Self {
        let side = world.canvas;
        let pooled_side = world.check_resolution;
        let templates = world
            .classes
            .iter()
            .map(|spec| {
                grid_points(spec)
                    .par_iter()
                    .map(|p| {
                        let values = pool(&render_shape(spec.kind, p, side), side, pooled_side);
                        let sum = values.iter().map(|&v| v as f64).sum();
                        let sum_sq = values.iter().map(|&v| (v as f64).powi(2)).sum();
                        Template { values, sum, sum_sq }
                    })
                    .collect()
            })
            .collect();
        Checker {
            world: world.clone(),
            pooled_side,
            templates,
            thresholds: vec![0.0; world.n_classes()],
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn set_thresholds(&mut self, thresholds: Vec<f64>) -> Result<()> {
        if thresholds.len() != self.world.n_classes() {
            return Err(Error::Config {
                key: "thresholds".into(),
                constraint: format!("need one per class ({})", self.world.n_classes()),
            });
        }
        self.thresholds = thresholds;
        Ok(())
    }

    pub fn template_count(&self, class: usize) -> usize {
        self.templates.get(class).map_or(0, Vec::len)
    }

    /// Root-mean-square residual of the best template fit.
    pub fn violation(&self, image: &FeatureMap, class: usize) -> Result<f64> {
        let templates = self.templates.get(class).ok_or(Error::UnknownClass(class))?;
        let w = &self.world;
        if image.dims() != (w.canvas, w.canvas, w.channels) {
            return Err(Error::shape(
                "check_validity",
                format!("image {:?}, canvas is {}x{}x{}", image.dims(), w.canvas, w.canvas, w.channels),
            ));
        }
        let x = pool(&w.project(image), w.canvas, self.pooled_side);
        let n = (self.pooled_side * self.pooled_side) as f64;
        let sx: f64 = x.iter().map(|&v| v as f64).sum();
        let sxx: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
        let best = templates
            .iter()
            .map(|t| box_residual(sx, sxx, dot(&x, &t.values), t.sum, t.sum_sq, n))
            .fold(f64::INFINITY, f64::min);
        Ok((best / n).sqrt())
    }

    /// `(valid, violation)` against the class threshold.
    pub fn check_validity(&self, image: &FeatureMap, class: usize) -> Result<(bool, f64)> {
        let v = self.violation(image, class)?;
        Ok((v <= self.thresholds[class], v))
    }

    /// Set each class threshold to `(1 + margin)` times the `quantile` of
    /// violations over `n` fresh samples drawn from `key`.
    pub fn calibrate(&mut self, n: usize, quantile: f64, margin: f64, key: StreamKey) -> Result<()> {
        let mut thresholds = Vec::with_capacity(self.world.n_classes());
        for class in 0..self.world.n_classes() {
            let mut v = (0..n)
                .into_par_iter()
                .map(|i| {
                    let s = self.world.generate_sample(class, key.derive(class as u64).derive(i as u64))?;
                    self.violation(&s.image, class)
                })
                .collect::<Result<Vec<f64>>>()?;
            v.sort_by(f64::total_cmp);
            let idx = ((quantile * n as f64).ceil() as usize).clamp(1, n) - 1;
            thresholds.push(v[idx] * (1.0 + margin));
        }
        self.thresholds = thresholds;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Eval];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Split> {
        Split::ALL.get(c as usize).copied()
    }
}

/// Stream key of sample `index` of `class` in `split`.
pub fn sample_key(root_seed: u64, split: Split, class: usize, index: usize) -> StreamKey {
    StreamKey::root(root_seed)
        .derive_str("world")
        .derive_str(split.label())
        .derive(class as u64)
        .derive(index as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub world: World,
    pub root_seed: u64,
    /// Samples per class in each split.
    pub per_class: Vec<(Split, usize)>,
    pub thresholds: Vec<f64>,
    pub calibration: CalibrationInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInfo {
    pub samples_per_class: usize,
    pub quantile: f64,
    pub margin: f64,
    pub seed_label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub split: Split,
    pub index: usize,
    pub sample: SyntheticSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub records: Vec<CorpusRecord>,
}

pub const CORPUS_MAGIC: &[u8; 4] = b"LSWD";
const CORPUS_VERSION: u32 = 1;

/// Samples of one split, ordered by class then index.
pub fn build_split(world: &World, split: Split, n_per_class: usize, root_seed: u64) -> Result<Vec<CorpusRecord>> {
    let jobs: Vec<(usize, usize)> = (0..world.n_classes())
        .flat_map(|c| (0..n_per_class).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .map(|&(class, index)| {
            Ok(CorpusRecord {
                split,
                index,
                sample: world.generate_sample(class, sample_key(root_seed, split, class, index))?,
            })
        })
        .collect()
}

/// Generate all splits and calibrate thresholds.
pub fn build_image_dataset(
    world: &World,
    per_class: &[(Split, usize)],
    root_seed: u64,
    calibration: CalibrationInfo,
    checker: &mut Checker,
) -> Result<Corpus> {
    if per_class.iter().any(|&(_, n)| n == 0) {
        return Err(Error::Config {
            key: "world.n_per_class".into(),
            constraint: "must be at least 1 in every split".into(),
        });
    }
    checker.calibrate(
        calibration.samples_per_class,
        calibration.quantile,
        calibration.margin,
        StreamKey::root(root_seed).derive_str(&calibration.seed_label),
    )?;
    let mut records = Vec::new();
    for &(split, n) in per_class {
        records.extend(build_split(world, split, n, root_seed)?);
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            world: world.clone(),
            root_seed,
            per_class: per_class.to_vec(),
            thresholds: checker.thresholds().to_vec(),
            calibration,
        },
        records,
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticSample> {
        self.records.iter().filter(move |r| r.split == split).map(|r| &r.sample)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_header(CORPUS_MAGIC, CORPUS_VERSION);
        w.str(&serde_json::to_string(&self.manifest)?);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            let s = &r.sample;
            w.u8(r.split.code());
            w.u16(s.class as u16);
            w.u32(r.index as u32);
            w.u8(s.params.shape.len() as u8);
            for &p in &s.params.shape {
                w.u64(p.to_bits());
            }
            w.u64(s.params.amplitude.to_bits());
            w.u64(s.params.background.to_bits());
            w.f32s(s.image.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Corpus> {
        let (mut r, version) = ByteReader::header(bytes, CORPUS_MAGIC, "corpus")?;
        if version != CORPUS_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let manifest: CorpusManifest = serde_json::from_str(&r.str()?)?;
        manifest.world.validate()?;
        let n = r.u64()? as usize;
        let world = &manifest.world;
        let per_image = world.canvas * world.canvas * world.channels;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let split = Split::from_code(r.u8()?).ok_or_else(|| r.err("unknown split code"))?;
            let class = r.u16()? as usize;
            let index = r.u32()? as usize;
            let np = r.u8()? as usize;
            let shape = (0..np).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            let amplitude = f64::from_bits(r.u64()?);
            let background = f64::from_bits(r.u64()?);
            let image = FeatureMap::new(world.canvas, world.canvas, world.channels, r.f32s(per_image)?)?;
            records.push(CorpusRecord {
                split,
                index,
                sample: SyntheticSample {
                    class,
                    image,
                    params: SampleParams {
                        shape,
                        amplitude,
                        background,
                    },
                },
            });
        }
        r.expect_end()?;
        Ok(Corpus { manifest, records })
    }

    /// A checker carrying the corpus' frozen thresholds.
    pub fn checker(&self) -> Result<Checker> {
        let mut c = Checker::new(&self.manifest.world);
        c.set_thresholds(self.manifest.thresholds.clone())?;
        Ok(c)
    }
}

/// Binary PGM of the one-channel projection, linearly mapped from
/// `[lo, hi]` to `[0, 255]`.
pub fn export_pgm(world: &World, image: &FeatureMap, lo: f32, hi: f32, path: &Path) -> Result<()> {
    let plane = world.project(image);
    let mut bytes = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for v in plane {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        bytes.push((t * 255.0).round() as u8);
    }
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::standard(8, 32, 4).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world();
        let k = StreamKey::root(3).derive(1);
        assert_eq!(w.generate_sample(0, k).unwrap(), w.generate_sample(0, k).unwrap());
    }

    #[test]
    fn noiseless_centered_render_is_the_template() {
        let w = world();
        for class in 0..8 {
            let p = w.center_params(class).unwrap();
            let img = w.render(class, &p, None).unwrap();
            let t = render_shape(w.classes[class].kind, &p.shape, 32);
            let expect: Vec<f32> = t
                .iter()
                .map(|&v| p.background as f32 + p.amplitude as f32 * v)
                .collect();
            assert_eq!(img, w.lift(&expect));
        }
    }

    #[test]
    fn centered_noiseless_samples_match_a_template_exactly() {
        let w = world();
        let checker = Checker::new(&w);
        for class in 0..8 {
            let img = w.render(class, &w.center_params(class).unwrap(), None).unwrap();
            assert!(checker.violation(&img, class).unwrap() < 1e-6, "class {class}");
        }
    }

    #[test]
    fn unknown_class_and_bad_shape_error() {
        let w = world();
        let checker = Checker::new(&w);
        assert!(matches!(
            checker.violation(&FeatureMap::zeros(32, 32, 4), 9),
            Err(Error::UnknownClass(9))
        ));
        assert!(checker.violation(&FeatureMap::zeros(16, 16, 4), 0).is_err());
    }

    #[test]
    fn box_fit_prefers_interior_solution() {
        let t: Vec<f32> = (0..16).map(|i| (i % 4) as f32 / 3.0).collect();
        let x: Vec<f32> = t.iter().map(|&v| 0.1 + 0.8 * v).collect();
        let s = |v: &[f32]| v.iter().map(|&a| a as f64).sum::<f64>();
        let r = box_residual(s(&x), dot(&x, &x), dot(&x, &t), s(&t), dot(&t, &t), 16.0);
        assert!(r < 1e-9);
    }

    #[test]
    fn split_keys_are_disjoint_and_counts_exact() {
        let w = World::standard(8, 16, 2).unwrap();
        let train = build_split(&w, Split::Train, 10, 5).unwrap();
        assert_eq!(train.len(), 80);
        for c in 0..8 {
            assert_eq!(train.iter().filter(|r| r.sample.class == c).count(), 10);
        }
        assert_ne!(sample_key(5, Split::Train, 0, 0), sample_key(5, Split::Eval, 0, 0));
        assert_eq!(train, build_split(&w, Split::Train, 10, 5).unwrap());
    }

    #[test]
    fn corpus_round_trip() {
        let w = World::standard(2, 16, 2).unwrap();
        let mut checker = Checker::new(&w);
        let cal = CalibrationInfo {
            samples_per_class: 20,
            quantile: 0.995,
            margin: 0.25,
            seed_label: "calibration".into(),
        };
        let corpus = build_image_dataset(&w, &[(Split::Train, 3), (Split::Eval, 2)], 9, cal, &mut checker).unwrap();
        assert_eq!(corpus.records.len(), 10);
        let back = Corpus::from_bytes(&corpus.to_bytes().unwrap()).unwrap();
        assert_eq!(back, corpus);
    }
}
