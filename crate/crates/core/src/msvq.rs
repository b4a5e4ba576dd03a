//! Multi-scale residual vector quantization, the shared codebook and the
//! fusion operator.
//!
//! Scale indices `k` are 1-based throughout, matching [`TokenMap::scale`].
//! Upsampling is bilinear (align-corners false). Downsampling a residual to
//! scale `k` uses the adjoint of that upsampler normalised by the area
//! ratio; with a zero vector in the codebook this makes every quantization
//! step unable to increase the residual norm.

use rayon::prelude::*;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::resize::{resize_batch, resize_batch_adjoint, ResizeKind};
use crate::nn::tensor::FeatureMap;
use crate::rng::StreamKey;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSchedule {
    dims: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(dims: Vec<(usize, usize)>) -> Result<Self> {
        let bad = |c: &str| Err(Error::Config {
            key: "msvq.schedule".into(),
            constraint: c.into(),
        });
        if dims.is_empty() {
            return bad("needs at least one scale");
        }
        if dims[0] != (1, 1) {
            return bad("first scale must be 1x1");
        }
        for w in dims.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.0 * a.1 >= b.0 * b.1 || b.0 < a.0 || b.1 < a.1 {
                return bad("scales must grow strictly");
            }
        }
        Ok(ScaleSchedule { dims })
    }

    /// Square powers of two from 1×1 up to `side`×`side`.
    pub fn powers_of_two(side: usize) -> Result<Self> {
        if !side.is_power_of_two() {
            return Err(Error::Config {
                key: "world.canvas".into(),
                constraint: "canvas side must be a power of two".into(),
            });
        }
        let mut dims = vec![];
        let mut s = 1;
        while s <= side {
            dims.push((s, s));
            s *= 2;
        }
        ScaleSchedule::new(dims)
    }

    pub fn dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    /// Number of scales `K`.
    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    /// Grid size of scale `k` (1-based).
    pub fn dim(&self, k: usize) -> (usize, usize) {
        self.dims[k - 1]
    }

    pub fn check_scale(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.dims.len() {
            return Err(Error::out_of_range(
                "scale index",
                k,
                format!("[1, {}]", self.dims.len()),
            ));
        }
        Ok(())
    }

    pub fn full(&self) -> (usize, usize) {
        *self.dims.last().unwrap()
    }

    pub fn tokens_at(&self, k: usize) -> usize {
        let (h, w) = self.dim(k);
        h * w
    }

    /// Residual at full resolution reduced to scale `k`.
    pub fn downsample(&self, map: &FeatureMap, k: usize) -> FeatureMap {
        let (h, w) = self.dim(k);
        let (fh, fw, c) = map.dims();
        if (h, w) == (fh, fw) {
            return map.clone();
        }
        let mut data = resize_batch_adjoint(map.data(), 1, (h, w), (fh, fw), c, ResizeKind::Bilinear);
        let norm = (h * w) as f32 / (fh * fw) as f32;
        for v in &mut data {
            *v *= norm;
        }
        FeatureMap::new(h, w, c, data).expect("shape")
    }

    /// Scale-`k` map brought to full resolution.
    pub fn upsample(&self, map: &FeatureMap) -> FeatureMap {
        let (fh, fw) = self.full();
        let (h, w, c) = map.dims();
        if (h, w) == (fh, fw) {
            return map.clone();
        }
        let data = resize_batch(map.data(), 1, (h, w), (fh, fw), c, ResizeKind::Bilinear);
        FeatureMap::new(fh, fw, c, data).expect("shape")
    }
}

/// `V × C` table of embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    channels: usize,
    vectors: Vec<f32>,
}

pub const CODEBOOK_MAGIC: &[u8; 4] = b"LSCB";
const CODEBOOK_VERSION: u32 = 1;
const DISTINCT_TOL: f64 = 1e-9;

impl Codebook {
    pub fn new(size: usize, channels: usize, vectors: Vec<f32>) -> Result<Self> {
        if size == 0 || channels == 0 || vectors.len() != size * channels {
            return Err(Error::shape(
                "codebook",
                format!("{size}x{channels} table with {} values", vectors.len()),
            ));
        }
        if size > u16::MAX as usize + 1 {
            return Err(Error::out_of_range("codebook size", size, "[1, 65536]"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        let book = Codebook {
            size,
            channels,
            vectors,
        };
        if let Some((a, b)) = book.duplicate_pair() {
            return Err(Error::Invariant(format!("codebook rows {a} and {b} coincide")));
        }
        Ok(book)
    }

    fn duplicate_pair(&self) -> Option<(usize, usize)> {
        for a in 0..self.size {
            for b in a + 1..self.size {
                if sq_dist(self.vector(a), self.vector(b)) <= DISTINCT_TOL * DISTINCT_TOL {
                    return Some((a, b));
                }
            }
        }
        None
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        &self.vectors[id * self.channels..(id + 1) * self.channels]
    }

    /// Nearest entry by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        nearest_in(&self.vectors, self.channels, v).0
    }

    /// Embed a token map as an `h × w × C` map.
    pub fn embed(&self, map: &TokenMap) -> FeatureMap {
        let mut data = Vec::with_capacity(map.ids.len() * self.channels);
        for &id in &map.ids {
            data.extend_from_slice(self.vector(id as usize));
        }
        FeatureMap::new(map.height, map.width, self.channels, data).expect("shape")
    }

    pub fn to_bytes(&self, schedule: &ScaleSchedule) -> Vec<u8> {
        let mut w = ByteWriter::with_header(CODEBOOK_MAGIC, CODEBOOK_VERSION);
        w.u32(self.size as u32);
        w.u32(self.channels as u32);
        write_schedule(&mut w, schedule);
        w.f32s(&self.vectors);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Codebook, ScaleSchedule)> {
        let (mut r, version) = ByteReader::header(bytes, CODEBOOK_MAGIC, "codebook")?;
        if version != CODEBOOK_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let size = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let schedule = read_schedule(&mut r)?;
        let vectors = r.f32s(size * channels)?;
        r.expect_end()?;
        Ok((Codebook::new(size, channels, vectors)?, schedule))
    }
}

pub(crate) fn write_schedule(w: &mut ByteWriter, schedule: &ScaleSchedule) {
    w.u16(schedule.len() as u16);
    for &(h, wd) in schedule.dims() {
        w.u16(h as u16);
        w.u16(wd as u16);
    }
}

pub(crate) fn read_schedule(r: &mut ByteReader) -> Result<ScaleSchedule> {
    let k = r.u16()? as usize;
    let mut dims = Vec::with_capacity(k);
    for _ in 0..k {
        dims.push((r.u16()? as usize, r.u16()? as usize));
    }
    ScaleSchedule::new(dims).map_err(|e| r.err(&e.to_string()))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index and squared distance of the nearest row of a flat table.
fn nearest_in(table: &[f32], channels: usize, v: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, row) in table.chunks_exact(channels).enumerate() {
        let d = sq_dist(row, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Grid of token ids for one scale.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenMap {
    /// 1-based scale index.
    pub scale: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u16>,
}

impl TokenMap {
    pub fn new(scale: usize, height: usize, width: usize, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(
                "token map",
                format!("{height}x{width} grid with {} ids", ids.len()),
            ));
        }
        Ok(TokenMap {
            scale,
            height,
            width,
            ids,
        })
    }

    pub fn filled(scale: usize, height: usize, width: usize, id: u16) -> Self {
        TokenMap {
            scale,
            height,
            width,
            ids: vec![id; height * width],
        }
    }
}

/// Token maps `r_1 … r_k` of one sample (a full code when `k = K`).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct MultiScaleCode {
    pub maps: Vec<TokenMap>,
}

impl MultiScaleCode {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// The first `k` maps.
    pub fn prefix(&self, k: usize) -> MultiScaleCode {
        MultiScaleCode {
            maps: self.maps[..k].to_vec(),
        }
    }

    pub fn validate(&self, schedule: &ScaleSchedule, vocab: usize) -> Result<()> {
        if self.maps.len() > schedule.len() {
            return Err(Error::Invariant(format!(
                "code has {} scales, schedule has {}",
                self.maps.len(),
                schedule.len()
            )));
        }
        for (i, m) in self.maps.iter().enumerate() {
            if m.scale != i + 1 || (m.height, m.width) != schedule.dim(i + 1) {
                return Err(Error::Invariant(format!(
                    "token map {} is scale {} of {}x{}, expected scale {} of {:?}",
                    i,
                    m.scale,
                    m.height,
                    m.width,
                    i + 1,
                    schedule.dim(i + 1)
                )));
            }
            if let Some(&bad) = m.ids.iter().find(|&&id| id as usize >= vocab) {
                return Err(Error::Invariant(format!("token id {bad} outside [0, {vocab})")));
            }
        }
        Ok(())
    }

    /// Per-scale grids as u16 LE with a scale-shape header.
    pub fn write(&self, w: &mut ByteWriter) {
        w.u8(self.maps.len() as u8);
        for m in &self.maps {
            w.u16(m.height as u16);
            w.u16(m.width as u16);
            for &id in &m.ids {
                w.u16(id);
            }
        }
    }

    pub fn read(r: &mut ByteReader) -> Result<Self> {
        let n = r.u8()? as usize;
        let mut maps = Vec::with_capacity(n);
        for k in 1..=n {
            let h = r.u16()? as usize;
            let w = r.u16()? as usize;
            let raw = r.take(h * w * 2)?;
            let ids = raw
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            maps.push(TokenMap::new(k, h, w, ids)?);
        }
        Ok(MultiScaleCode { maps })
    }
}

/// Result of encoding one feature map.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub code: MultiScaleCode,
    /// `‖residual‖₂` after each scale.
    pub residual_norms: Vec<f64>,
    /// Residual left after the last scale.
    pub residual: FeatureMap,
}

fn check_map(f: &FeatureMap, book: &Codebook, schedule: &ScaleSchedule) -> Result<()> {
    let (h, w) = schedule.full();
    if (f.height(), f.width()) != (h, w) || f.channels() != book.channels() {
        return Err(Error::shape(
            "encode",
            format!(
                "feature map {:?} vs schedule {h}x{w} and codebook C={}",
                f.dims(),
                book.channels()
            ),
        ));
    }
    Ok(())
}

/// Residual encoding loop. `inputs`, when given, receives the quantizer
/// inputs (downsampled residuals) of every scale.
fn encode_inner(
    f: &FeatureMap,
    book: &Codebook,
    schedule: &ScaleSchedule,
    mut inputs: Option<&mut Vec<f32>>,
) -> Encoding {
    let mut residual = f.clone();
    let mut maps = Vec::with_capacity(schedule.len());
    let mut norms = Vec::with_capacity(schedule.len());
    for k in 1..=schedule.len() {
        let (h, w) = schedule.dim(k);
        let z = schedule.downsample(&residual, k);
        if let Some(buf) = inputs.as_deref_mut() {
            buf.extend_from_slice(z.data());
        }
        let ids: Vec<u16> = z
            .data()
            .chunks_exact(book.channels())
            .map(|v| book.nearest(v) as u16)
            .collect();
        let map = TokenMap::new(k, h, w, ids).expect("shape");
        residual.sub_assign(&schedule.upsample(&book.embed(&map)));
        norms.push(residual.norm());
        maps.push(map);
    }
    Encoding {
        code: MultiScaleCode { maps },
        residual_norms: norms,
        residual,
    }
}

pub fn encode_multiscale(f: &FeatureMap, book: &Codebook, schedule: &ScaleSchedule) -> Result<Encoding> {
    check_map(f, book, schedule)?;
    Ok(encode_inner(f, book, schedule, None))
}

/// `Σ_j upsample(embed(r_j))` over the maps of `code`.
pub fn fuse(code: &MultiScaleCode, book: &Codebook, schedule: &ScaleSchedule) -> Result<FeatureMap> {
    if code.is_empty() {
        return Err(Error::Invariant("fuse needs a nonempty prefix".into()));
    }
    code.validate(schedule, book.size())?;
    let (h, w) = schedule.full();
    let mut e = FeatureMap::zeros(h, w, book.channels());
    for m in &code.maps {
        e.add_assign(&schedule.upsample(&book.embed(m)));
    }
    Ok(e)
}

/// `e_prev + upsample(embed(r_k))`; cost independent of `k`.
pub fn fuse_incremental(
    e_prev: &FeatureMap,
    map: &TokenMap,
    book: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<FeatureMap> {
    schedule.check_scale(map.scale)?;
    if (map.height, map.width) != schedule.dim(map.scale) {
        return Err(Error::shape(
            "fuse",
            format!("token map {}x{} at scale {}", map.height, map.width, map.scale),
        ));
    }
    if let Some(&bad) = map.ids.iter().find(|&&id| id as usize >= book.size()) {
        return Err(Error::Invariant(format!("token id {bad} outside codebook")));
    }
    let mut e = e_prev.clone();
    e.add_assign(&schedule.upsample(&book.embed(map)));
    Ok(e)
}

/// Codebook fitting knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub size: usize,
    /// Keep row 0 fixed at the zero vector (needs `size ≥ 2`).
    pub pin_zero: bool,
    pub lloyd_iters: usize,
    pub refine_rounds: usize,
    /// Cap on the number of samples pooled for fitting.
    pub max_samples: usize,
}

impl FitOptions {
    pub fn new(size: usize) -> Self {
        FitOptions {
            size,
            pin_zero: true,
            lloyd_iters: 12,
            refine_rounds: 2,
            max_samples: 1200,
        }
    }
}

/// Fit a codebook: k-means on raw downsampled vectors, then
/// `refine_rounds` rounds of re-encoding with the current codebook and
/// refitting on the pooled quantizer inputs.
pub fn fit_codebook(
    samples: &[&FeatureMap],
    schedule: &ScaleSchedule,
    options: &FitOptions,
    key: StreamKey,
) -> Result<Codebook> {
    let v = options.size;
    if v == 0 {
        return Err(Error::out_of_range("codebook size", v, "[1, 65536]"));
    }
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("codebook fitting needs at least one sample".into()))?;
    let c = first.channels();
    let pin = options.pin_zero && v >= 2;

    let chosen: Vec<&FeatureMap> = if samples.len() > options.max_samples {
        let stride = samples.len() as f64 / options.max_samples as f64;
        (0..options.max_samples)
            .map(|i| samples[(i as f64 * stride) as usize])
            .collect()
    } else {
        samples.to_vec()
    };

    let mut points = Vec::new();
    for f in &chosen {
        for k in 1..=schedule.len() {
            points.extend_from_slice(schedule.downsample(f, k).data());
        }
    }
    let mut centers = kmeans_pp_init(&points, c, v, pin, key.derive_str("init"));
    lloyd(&points, c, &mut centers, pin, options.lloyd_iters);

    for _ in 0..options.refine_rounds {
        let book = Codebook {
            size: v,
            channels: c,
            vectors: centers.clone(),
        };
        let per_sample: Vec<Vec<f32>> = chosen
            .par_iter()
            .map(|f| {
                let mut buf = Vec::new();
                encode_inner(f, &book, schedule, Some(&mut buf));
                buf
            })
            .collect();
        points = per_sample.concat();
        lloyd(&points, c, &mut centers, pin, options.lloyd_iters);
    }
    make_distinct(&points, c, &mut centers, pin);
    Codebook::new(v, c, centers)
}

fn kmeans_pp_init(points: &[f32], c: usize, v: usize, pin: bool, key: StreamKey) -> Vec<f32> {
    let n = points.len() / c;
    let mut rng = key.stream();
    let mut centers = Vec::with_capacity(v * c);
    if pin {
        centers.extend(std::iter::repeat_n(0.0f32, c));
    } else {
        let i = rng.below(n);
        centers.extend_from_slice(&points[i * c..(i + 1) * c]);
    }
    let mut d2: Vec<f64> = points
        .chunks_exact(c)
        .map(|p| sq_dist(p, &centers[..c]))
        .collect();
    while centers.len() < v * c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.below(n)
        };
        let start = centers.len();
        centers.extend_from_slice(&points[pick * c..(pick + 1) * c]);
        let new = centers[start..start + c].to_vec();
        for (d, p) in d2.iter_mut().zip(points.chunks_exact(c)) {
            *d = d.min(sq_dist(p, &new));
        }
    }
    centers
}

const ASSIGN_CHUNK: usize = 4096;

fn assign(points: &[f32], c: usize, centers: &[f32]) -> Vec<(usize, f64)> {
    points
        .par_chunks(ASSIGN_CHUNK * c)
        .flat_map_iter(|chunk| {
            chunk
                .chunks_exact(c)
                .map(|p| nearest_in(centers, c, p))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Lloyd iterations with sums in f64 accumulated in point order. Empty
/// clusters are re-seeded with the point farthest from its centre (lowest
/// index on ties), each point used at most once per iteration.
fn lloyd(points: &[f32], c: usize, centers: &mut [f32], pin: bool, iters: usize) {
    let v = centers.len() / c;
    for _ in 0..iters {
        let assignment = assign(points, c, centers);
        let mut sums = vec![0.0f64; v * c];
        let mut counts = vec![0usize; v];
        for (p, &(a, _)) in points.chunks_exact(c).zip(&assignment) {
            counts[a] += 1;
            for (s, &x) in sums[a * c..(a + 1) * c].iter_mut().zip(p) {
                *s += x as f64;
            }
        }
        let mut taken = vec![false; assignment.len()];
        for j in 0..v {
            if pin && j == 0 {
                continue;
            }
            if counts[j] > 0 {
                for i in 0..c {
                    centers[j * c + i] = (sums[j * c + i] / counts[j] as f64) as f32;
                }
            } else if let Some(far) = farthest(&assignment, &taken) {
                taken[far] = true;
                centers[j * c..(j + 1) * c].copy_from_slice(&points[far * c..(far + 1) * c]);
            }
        }
    }
}

fn farthest(assignment: &[(usize, f64)], taken: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(_, d)) in assignment.iter().enumerate() {
        if taken[i] {
            continue;
        }
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Replace coinciding rows by far points, then by deterministic offsets if
/// the data has too few distinct vectors.
fn make_distinct(points: &[f32], c: usize, centers: &mut [f32], pin: bool) {
    let v = centers.len() / c;
    let assignment = assign(points, c, centers);
    let mut taken = vec![false; assignment.len()];
    for b in 0..v {
        loop {
            let dup = (0..b).any(|a| {
                sq_dist(&centers[a * c..(a + 1) * c], &centers[b * c..(b + 1) * c])
                    <= DISTINCT_TOL * DISTINCT_TOL
            });
            if !dup || (pin && b == 0) {
                break;
            }
            match farthest(&assignment, &taken) {
                Some(far) => {
                    taken[far] = true;
                    centers[b * c..(b + 1) * c].copy_from_slice(&points[far * c..(far + 1) * c]);
                }
                None => {
                    centers[b * c] += 1e-3 * b as f32;
                }
            }
        }
    }
}
