//! Staged pipeline over a working directory. Every stage writes its
//! outputs plus a manifest holding the hash of its inputs (config echo and
//! upstream output hashes) and of each output file. A stage whose manifest
//! matches is skipped; a stage reading a stale or modified upstream
//! artifact refuses to run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::binio::write_atomic;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    compute_report, eval_pool_key, evaluate_generator, extract_features, generate_set, line_plot_svg, run_sweep,
    scale_replacement_ablation, summarize_sweep, sweep_csv, sweep_timing_csv, AblationReport, ComputeReport,
    EvalStack, FeatureExtractor, FrechetStats, Generator, MeanStd, MetricsReport, ScorerDiagnostics, SweepPoint,
    SweepRow,
};
use crate::lsrs::{
    build_score_dataset, lsrs_generate, score_dataset, train_scorer, LossKind, LsrsConfig, ScoreDataset,
    ScorerEpoch, ScoringModel, Selection, Trace, TRACE_CSV_HEADER,
};
use crate::msvq::{encode_multiscale, fit_codebook, Codebook, FitOptions, MultiScaleCode, ScaleSchedule};
use crate::nn::tensor::FeatureMap;
use crate::prior::{generate_baseline, teacher_samples, train_prior, PriorModel};
use crate::rng::StreamKey;
use crate::synth::{build_image_dataset, export_pgm, CalibrationInfo, Checker, Corpus, Split, World};

/// First 64 bits of the SHA-256 digest, as hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    format!("{:016x}", u64::from_be_bytes(d[..8].try_into().unwrap()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub inputs: String,
    pub upstream: BTreeMap<String, String>,
    pub config: Value,
    /// Output file name → content hash.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub info: Value,
}

impl StageManifest {
    /// Hash summarizing every output of the stage.
    pub fn digest(&self) -> String {
        content_hash(serde_json::to_string(&self.outputs).unwrap().as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

/// Loss and first-scale handling of one trained scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScorerVariant {
    pub loss: LossKind,
    pub exclude_first_scale: bool,
    pub seed: u64,
}

impl ScorerVariant {
    pub fn name(&self) -> String {
        format!(
            "{}{}-s{}",
            self.loss.label(),
            if self.exclude_first_scale { "-nofirst" } else { "" },
            self.seed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    M,
    St,
    TopK,
    LossKind,
    FirstScaleExclusion,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::M => "m",
            SweepAxis::St => "st",
            SweepAxis::TopK => "top-k",
            SweepAxis::LossKind => "loss-kind",
            SweepAxis::FirstScaleExclusion => "first-scale-exclusion",
        }
    }

    pub fn parse(s: &str) -> Option<SweepAxis> {
        [
            SweepAxis::M,
            SweepAxis::St,
            SweepAxis::TopK,
            SweepAxis::LossKind,
            SweepAxis::FirstScaleExclusion,
        ]
        .into_iter()
        .find(|a| a.label() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub class: usize,
    pub seed: u64,
    /// `None` runs plain next-scale sampling.
    pub lsrs: Option<LsrsConfig>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub dir: PathBuf,
    pub code: MultiScaleCode,
    pub valid: bool,
    pub violation: f64,
    pub trace: Option<Trace>,
}

/// Trained models and data shared by the evaluation stages.
pub struct EvalContext {
    pub corpus: Corpus,
    pub checker: Checker,
    pub book: Codebook,
    pub schedule: ScaleSchedule,
    pub prior: PriorModel,
    pub extractor: FeatureExtractor,
    pub real_stats: FrechetStats,
    pub hashes: BTreeMap<String, String>,
}

impl EvalContext {
    pub fn stack(&self, config: &RunConfig) -> EvalStack<'_> {
        EvalStack {
            prior: &self.prior,
            book: &self.book,
            schedule: &self.schedule,
            checker: &self.checker,
            extractor: &self.extractor,
            real_stats: &self.real_stats,
            sampler: config.prior.sampler,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub baseline: Vec<MetricsReport>,
    pub lsrs: Vec<MetricsReport>,
    pub seeds: Vec<u64>,
    pub st: usize,
    pub m: usize,
    pub scorer: ScorerDiagnostics,
    pub compute: ComputeReport,
    pub checkpoints: BTreeMap<String, String>,
}

type Logger = Box<dyn Fn(&str) + Send + Sync>;

pub struct Pipeline {
    pub config: RunConfig,
    pub workdir: PathBuf,
    log: Logger,
}

const DATA: &str = "data";
const CODEBOOK: &str = "codebook";
const PRIOR: &str = "prior";
const SCORE_DATA: &str = "score-data";

fn scorer_stage(v: &ScorerVariant) -> String {
    format!("scorer-{}", v.name())
}

impl Pipeline {
    pub fn new(config: RunConfig, workdir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let workdir = workdir.into();
        std::fs::create_dir_all(&workdir)?;
        let p = Pipeline {
            config,
            workdir,
            log: Box::new(|_| {}),
        };
        write_atomic(&p.workdir.join("config.resolved.json"), p.config.to_json().as_bytes())?;
        Ok(p)
    }

    pub fn with_logger(mut self, log: impl Fn(&str) + Send + Sync + 'static) -> Self {
        self.log = Box::new(log);
        self
    }

    fn say(&self, msg: &str) {
        (self.log)(msg)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.workdir.join(stage)
    }

    fn root_key(&self) -> StreamKey {
        StreamKey::root(self.config.world.seed)
    }

    pub fn main_variant(&self) -> ScorerVariant {
        ScorerVariant {
            loss: self.config.lsrs.train.loss,
            exclude_first_scale: self.config.lsrs.train.exclude_first_scale,
            seed: self.config.lsrs.seed,
        }
    }

    /// Config echo and upstream stages of a stage.
    fn stage_spec(&self, stage: &str) -> Result<(Value, Vec<String>)> {
        let c = &self.config;
        Ok(match stage {
            DATA => (json!({ "world": c.world }), vec![]),
            CODEBOOK => (json!({ "msvq": c.msvq }), vec![DATA.into()]),
            PRIOR => (json!({ "prior": c.prior }), vec![DATA.into(), CODEBOOK.into()]),
            SCORE_DATA => (
                json!({
                    "n_gen_per_class": c.lsrs.n_gen_per_class,
                    "n_real_per_class": c.lsrs.n_real_per_class,
                    "val_gen_per_class": c.lsrs.val_gen_per_class,
                    "sampler": c.prior.sampler,
                }),
                vec![DATA.into(), CODEBOOK.into(), PRIOR.into()],
            ),
            s if s.starts_with("scorer-") => {
                let v = self.variant_of(s)?;
                let mut train = c.lsrs.train.clone();
                train.loss = v.loss;
                train.exclude_first_scale = v.exclude_first_scale;
                (
                    json!({ "scorer": c.scorer_config(), "train": train, "seed": v.seed }),
                    vec![SCORE_DATA.into()],
                )
            }
            other => return Err(Error::Invariant(format!("unknown stage {other}"))),
        })
    }

    fn variant_of(&self, stage: &str) -> Result<ScorerVariant> {
        let name = stage.trim_start_matches("scorer-");
        let (head, seed) = name
            .rsplit_once("-s")
            .ok_or_else(|| Error::Invariant(format!("bad scorer stage {stage}")))?;
        let seed: u64 = seed.parse().map_err(|_| Error::Invariant(format!("bad scorer stage {stage}")))?;
        let (loss, nofirst) = match head.strip_suffix("-nofirst") {
            Some(h) => (h, true),
            None => (head, false),
        };
        let loss = match loss {
            "pairwise" => LossKind::Pairwise,
            "pointwise" => LossKind::Pointwise,
            _ => return Err(Error::Invariant(format!("bad scorer stage {stage}"))),
        };
        Ok(ScorerVariant {
            loss,
            exclude_first_scale: nofirst,
            seed,
        })
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.stage_dir(stage).join("manifest.json")
    }

    fn read_manifest(&self, stage: &str) -> Result<Option<StageManifest>> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
    }

    fn command_for(stage: &str) -> String {
        match stage {
            DATA => "gen-data".into(),
            CODEBOOK => "fit-codebook".into(),
            PRIOR => "train-prior".into(),
            SCORE_DATA => "build-score-dataset".into(),
            _ => "train-scorer".into(),
        }
    }

    /// Input hash a stage would have now.
    fn expected_inputs(&self, stage: &str) -> Result<(String, Value, BTreeMap<String, String>)> {
        let (config, ups) = self.stage_spec(stage)?;
        let mut upstream = BTreeMap::new();
        for u in ups {
            let m = self.verify(&u)?;
            upstream.insert(u, m.digest());
        }
        let text = serde_json::to_string(&json!({ "stage": stage, "config": config, "upstream": upstream }))?;
        Ok((content_hash(text.as_bytes()), config, upstream))
    }

    /// Manifest of a completed stage whose inputs and outputs still match.
    pub fn verify(&self, stage: &str) -> Result<StageManifest> {
        let cmd = Self::command_for(stage);
        let m = self.read_manifest(stage)?.ok_or_else(|| {
            Error::Dataset(format!("stage `{stage}` has not been run; run `lsrs {cmd}` first"))
        })?;
        let (inputs, _, _) = self.expected_inputs(stage)?;
        if m.inputs != inputs {
            return Err(Error::Dataset(format!(
                "stage `{stage}` is stale: it was built from different config or upstream artifacts; rerun `lsrs {cmd}`"
            )));
        }
        for (file, hash) in &m.outputs {
            let path = self.stage_dir(stage).join(file);
            let bytes = std::fs::read(&path).map_err(|e| {
                Error::Dataset(format!("artifact {} is missing ({e}); rerun `lsrs {cmd}`", path.display()))
            })?;
            if &content_hash(&bytes) != hash {
                return Err(Error::Dataset(format!(
                    "artifact {} does not match its manifest hash; rerun `lsrs {cmd}`",
                    path.display()
                )));
            }
        }
        Ok(m)
    }

    fn up_to_date(&self, stage: &str) -> bool {
        self.verify(stage).is_ok()
    }

    /// Write outputs, then the manifest. Outputs of a failed commit are
    /// removed.
    fn commit(&self, stage: &str, files: Vec<(String, Vec<u8>)>, info: Value) -> Result<StageManifest> {
        let (inputs, config, upstream) = self.expected_inputs(stage)?;
        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&dir)?;
        let _ = std::fs::remove_file(self.manifest_path(stage));
        let mut outputs = BTreeMap::new();
        let mut written = Vec::new();
        for (name, bytes) in &files {
            let path = dir.join(name);
            if let Err(e) = write_atomic(&path, bytes) {
                for p in written {
                    let _ = std::fs::remove_file(p);
                }
                return Err(e);
            }
            written.push(path);
            outputs.insert(name.clone(), content_hash(bytes));
        }
        let m = StageManifest {
            stage: stage.to_string(),
            inputs,
            upstream,
            config,
            outputs,
            info,
        };
        write_atomic(&self.manifest_path(stage), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    }

    fn read_output(&self, stage: &str, file: &str) -> Result<Vec<u8>> {
        self.verify(stage)?;
        Ok(std::fs::read(self.stage_dir(stage).join(file))?)
    }

    pub fn gen_data(&self) -> Result<StageStatus> {
        if self.up_to_date(DATA) {
            return Ok(StageStatus::UpToDate);
        }
        let w = &self.config.world;
        let world = World::standard(w.classes, w.canvas, w.channels)?;
        let mut checker = Checker::new(&world);
        let t0 = Instant::now();
        let corpus = build_image_dataset(
            &world,
            &self.config.splits(),
            w.seed,
            CalibrationInfo {
                samples_per_class: w.calibration_samples,
                quantile: w.calibration_quantile,
                margin: w.threshold_margin,
                seed_label: "calibration".into(),
            },
            &mut checker,
        )?;
        self.say(&format!(
            "generated {} samples, thresholds {:?} ({:.1?})",
            corpus.records.len(),
            checker.thresholds(),
            t0.elapsed()
        ));
        self.commit(
            DATA,
            vec![("corpus.bin".into(), corpus.to_bytes()?)],
            json!({ "thresholds": checker.thresholds(), "records": corpus.records.len() }),
        )?;
        Ok(StageStatus::Ran)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        Corpus::from_bytes(&self.read_output(DATA, "corpus.bin")?)
    }

    pub fn fit_codebook(&self) -> Result<StageStatus> {
        if self.up_to_date(CODEBOOK) {
            return Ok(StageStatus::UpToDate);
        }
        let corpus = self.load_corpus()?;
        let schedule = self.config.msvq.schedule()?;
        let maps: Vec<&FeatureMap> = corpus.split(Split::Train).map(|s| &s.image).collect();
        let mut opts = FitOptions::new(self.config.msvq.vocab);
        opts.max_samples = self.config.msvq.fit_samples;
        let t0 = Instant::now();
        let book = fit_codebook(&maps, &schedule, &opts, StreamKey::root(self.config.msvq.seed).derive_str("codebook"))?;
        self.say(&format!("fitted {}-entry codebook ({:.1?})", book.size(), t0.elapsed()));
        self.commit(CODEBOOK, vec![("codebook.bin".into(), book.to_bytes(&schedule))], Value::Null)?;
        Ok(StageStatus::Ran)
    }

    pub fn load_codebook(&self) -> Result<(Codebook, ScaleSchedule)> {
        Codebook::from_bytes(&self.read_output(CODEBOOK, "codebook.bin")?)
    }

    pub fn train_prior(&self) -> Result<StageStatus> {
        if self.up_to_date(PRIOR) {
            return Ok(StageStatus::UpToDate);
        }
        let corpus = self.load_corpus()?;
        let (book, schedule) = self.load_codebook()?;
        let mut model = PriorModel::new(self.config.prior_config(), StreamKey::root(self.config.prior.seed))?;
        let images: Vec<(usize, &FeatureMap)> = corpus.split(Split::Train).map(|s| (s.class, &s.image)).collect();
        let data = teacher_samples(&model, &images, &book, &schedule)?;
        let t0 = Instant::now();
        let mut curve = String::from("epoch,loss\n");
        let report = train_prior(
            &mut model,
            &data,
            &self.config.prior.train,
            StreamKey::root(self.config.prior.seed).derive_str("train"),
            |e, l| {
                let _ = writeln!(curve, "{e},{l}");
                self.say(&format!("prior epoch {e}: loss {l:.4} ({:.1?})", t0.elapsed()));
            },
        )?;
        self.commit(
            PRIOR,
            vec![("prior.ckpt".into(), model.to_bytes()?), ("loss.csv".into(), curve.into_bytes())],
            json!({ "epoch_loss": report.epoch_loss }),
        )?;
        Ok(StageStatus::Ran)
    }

    pub fn load_prior(&self) -> Result<PriorModel> {
        PriorModel::from_bytes(&self.read_output(PRIOR, "prior.ckpt")?)
    }

    fn encoded(&self, corpus: &Corpus, split: Split, per_class: usize, book: &Codebook, schedule: &ScaleSchedule) -> Result<Vec<(usize, u64, MultiScaleCode)>> {
        corpus
            .records
            .par_iter()
            .filter(|r| r.split == split && r.index < per_class)
            .map(|r| Ok((r.sample.class, r.index as u64, encode_multiscale(&r.sample.image, book, schedule)?.code)))
            .collect()
    }

    pub fn build_score_dataset(&self) -> Result<StageStatus> {
        if self.up_to_date(SCORE_DATA) {
            return Ok(StageStatus::UpToDate);
        }
        let corpus = self.load_corpus()?;
        let (book, schedule) = self.load_codebook()?;
        let prior = self.load_prior()?;
        let l = &self.config.lsrs;
        let sampler = self.config.prior.sampler;
        let t0 = Instant::now();
        let real = self.encoded(&corpus, Split::Train, l.n_real_per_class, &book, &schedule)?;
        let train = build_score_dataset(&prior, &real, &book, &schedule, l.n_gen_per_class, &sampler, self.root_key(), "train")?;
        let val_real = self.encoded(&corpus, Split::Val, usize::MAX, &book, &schedule)?;
        let val = build_score_dataset(&prior, &val_real, &book, &schedule, l.val_gen_per_class, &sampler, self.root_key(), "val")?;
        self.say(&format!(
            "score datasets: {} train, {} validation trajectories ({:.1?})",
            train.trajectories.len(),
            val.trajectories.len(),
            t0.elapsed()
        ));
        self.commit(
            SCORE_DATA,
            vec![("train.bin".into(), train.to_bytes()?), ("val.bin".into(), val.to_bytes()?)],
            json!({ "train_counts": train.manifest.counts, "val_counts": val.manifest.counts }),
        )?;
        Ok(StageStatus::Ran)
    }

    pub fn load_score_datasets(&self) -> Result<(ScoreDataset, ScoreDataset)> {
        Ok((
            ScoreDataset::from_bytes(&self.read_output(SCORE_DATA, "train.bin")?)?,
            ScoreDataset::from_bytes(&self.read_output(SCORE_DATA, "val.bin")?)?,
        ))
    }

    pub fn train_scorer(&self) -> Result<StageStatus> {
        self.train_scorer_variant(self.main_variant())
    }

    pub fn train_scorer_variant(&self, variant: ScorerVariant) -> Result<StageStatus> {
        let stage = scorer_stage(&variant);
        if self.up_to_date(&stage) {
            return Ok(StageStatus::UpToDate);
        }
        let (book, schedule) = self.load_codebook()?;
        let (train, val) = self.load_score_datasets()?;
        let mut model = ScoringModel::new(self.config.scorer_config(), StreamKey::root(variant.seed).derive_str("scorer"))?;
        let mut cfg = self.config.lsrs.train.clone();
        cfg.loss = variant.loss;
        cfg.exclude_first_scale = variant.exclude_first_scale;
        let t0 = Instant::now();
        let mut curves = String::from("epoch,train_loss,scale,val_loss,val_accuracy\n");
        let history = train_scorer(
            &mut model,
            &train,
            Some(&val),
            &book,
            &schedule,
            &cfg,
            StreamKey::root(variant.seed).derive_str("scorer-train"),
            |e, r: &ScorerEpoch| {
                let v = r.validation.as_ref().expect("validation set given");
                for s in &v.per_scale {
                    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into());
                    let _ = writeln!(curves, "{e},{},{},{},{}", r.train_loss, s.scale, opt(s.loss), opt(s.accuracy));
                }
                let acc: Vec<String> = v
                    .per_scale
                    .iter()
                    .map(|s| s.accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into()))
                    .collect();
                self.say(&format!(
                    "scorer {} epoch {e}: loss {:.4}, val accuracy [{}] ({:.1?})",
                    variant.name(),
                    r.train_loss,
                    acc.join(" "),
                    t0.elapsed()
                ));
            },
        )?;
        let last = history.last().and_then(|h| h.validation.clone());
        self.commit(
            &stage,
            vec![("scorer.ckpt".into(), model.to_bytes()?), ("curves.csv".into(), curves.into_bytes())],
            json!({ "variant": variant, "validation": last }),
        )?;
        Ok(StageStatus::Ran)
    }

    pub fn load_scorer(&self, variant: ScorerVariant) -> Result<ScoringModel> {
        ScoringModel::from_bytes(&self.read_output(&scorer_stage(&variant), "scorer.ckpt")?)
    }

    /// Scorer of a variant, training it first when needed.
    pub fn ensure_scorer(&self, variant: ScorerVariant) -> Result<ScoringModel> {
        self.train_scorer_variant(variant)?;
        self.load_scorer(variant)
    }

    pub fn eval_context(&self) -> Result<EvalContext> {
        let corpus = self.load_corpus()?;
        let checker = corpus.checker()?;
        let (book, schedule) = self.load_codebook()?;
        let prior = self.load_prior()?;
        let extractor = FeatureExtractor::new(self.config.eval.extractor_seed, self.config.world.channels)?;
        let real: Vec<&FeatureMap> = corpus.split(Split::Eval).map(|s| &s.image).collect();
        let (_, real_stats) = extract_features(&extractor, &real)?;
        let mut hashes = BTreeMap::new();
        for s in [DATA, CODEBOOK, PRIOR] {
            hashes.insert(s.to_string(), self.verify(s)?.digest());
        }
        Ok(EvalContext {
            corpus,
            checker,
            book,
            schedule,
            prior,
            extractor,
            real_stats,
            hashes,
        })
    }

    fn scorer_hash(&self, variant: ScorerVariant) -> Result<String> {
        Ok(self.verify(&scorer_stage(&variant))?.digest())
    }

    pub fn sample(&self, req: &SampleRequest) -> Result<SampleOutput> {
        let ctx = self.eval_context()?;
        let key = StreamKey::root(req.seed).derive_str("sample");
        let (generation, trace, tag) = match &req.lsrs {
            None => (
                generate_baseline(&ctx.prior, req.class, &self.config.prior.sampler, &ctx.book, &ctx.schedule, key)?,
                None,
                "baseline".to_string(),
            ),
            Some(cfg) => {
                let scorer = self.load_scorer(self.main_variant())?;
                let (g, t) = lsrs_generate(&ctx.prior, &scorer, req.class, &self.config.prior.sampler, cfg, &ctx.book, &ctx.schedule, key)?;
                let sel = match cfg.selection {
                    Selection::Greedy => "greedy".to_string(),
                    Selection::Topk { k_sel } => format!("topk{k_sel}"),
                };
                let counts: Vec<String> = cfg.counts.iter().map(|m| m.to_string()).collect();
                (g, Some(t), format!("lsrs-{}-{sel}", counts.join("_")))
            }
        };
        let (valid, violation) = ctx.checker.check_validity(&generation.image, req.class)?;
        let dir = self.workdir.join("samples").join(format!("c{}-s{}-{tag}", req.class, req.seed));
        std::fs::create_dir_all(&dir)?;
        let ids: Vec<&[u16]> = generation.code.maps.iter().map(|m| m.ids.as_slice()).collect();
        write_atomic(&dir.join("code.json"), serde_json::to_string(&ids)?.as_bytes())?;
        export_pgm(&ctx.checker.world().clone(), &generation.image, -0.1, 1.2, &dir.join("image.pgm"))?;
        let mut meta = json!({
            "class": req.class, "seed": req.seed, "valid": valid, "violation": violation,
            "prior_forwards": generation.prior_forwards, "checkpoints": ctx.hashes,
        });
        if let Some(t) = &trace {
            let mut csv = format!("{TRACE_CSV_HEADER}\n");
            t.csv_rows(0, &mut csv);
            write_atomic(&dir.join("trace.csv"), csv.as_bytes())?;
            meta["scorer_forwards"] = json!(t.scorer_forwards);
            meta["fusion_ops"] = json!(t.fusion_ops);
            meta["scorer"] = json!(self.scorer_hash(self.main_variant())?);
        }
        write_atomic(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        Ok(SampleOutput {
            dir,
            code: generation.code,
            valid,
            violation,
            trace,
        })
    }

    /// Scale-replacement ablation on real eval codes and on baseline
    /// generations.
    pub fn ablate_scale(&self) -> Result<(AblationReport, AblationReport)> {
        let ctx = self.eval_context()?;
        let n = self.config.eval.ablation_samples;
        let classes = self.config.world.classes;
        let real: Vec<(usize, MultiScaleCode)> = ctx
            .corpus
            .records
            .par_iter()
            .filter(|r| r.split == Split::Eval)
            .map(|r| Ok((r.sample.class, encode_multiscale(&r.sample.image, &ctx.book, &ctx.schedule)?.code)))
            .collect::<Result<Vec<_>>>()?;
        let key = self.root_key().derive_str("ablation");
        let generated: Vec<(usize, MultiScaleCode)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let c = i % classes;
                let g = generate_baseline(&ctx.prior, c, &self.config.prior.sampler, &ctx.book, &ctx.schedule, key.derive_str("gen").derive(i as u64))?;
                Ok((c, g.code))
            })
            .collect::<Result<_>>()?;
        let real_report = scale_replacement_ablation(&real, &ctx.book, &ctx.schedule, &ctx.checker, key.derive_str("real"))?;
        let gen_report = scale_replacement_ablation(&generated, &ctx.book, &ctx.schedule, &ctx.checker, key.derive_str("generated"))?;
        let mut csv = String::from("source,scale,mean_violation_delta\n");
        for (name, r) in [("real", &real_report), ("generated", &gen_report)] {
            for (k, d) in r.deltas.iter().enumerate() {
                let _ = writeln!(csv, "{name},{},{d}", k + 1);
            }
        }
        let dir = self.workdir.join("ablation");
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("ablation.csv"), csv.as_bytes())?;
        write_atomic(
            &dir.join("ablation.json"),
            serde_json::to_string_pretty(&json!({ "real": real_report, "generated": gen_report, "checkpoints": ctx.hashes }))?.as_bytes(),
        )?;
        Ok((real_report, gen_report))
    }

    pub fn sweep(&self, axis: SweepAxis) -> Result<Vec<SweepRow>> {
        let ctx = self.eval_context()?;
        self.sweep_with(&ctx, axis)
    }

    pub fn sweep_with(&self, ctx: &EvalContext, axis: SweepAxis) -> Result<Vec<SweepRow>> {
        let c = &self.config;
        let k = c.scales();
        let main = self.main_variant();
        let mut variants = vec![main];
        match axis {
            SweepAxis::LossKind => {
                for loss in [LossKind::Pairwise, LossKind::Pointwise] {
                    variants.push(ScorerVariant { loss, ..main });
                }
            }
            SweepAxis::FirstScaleExclusion => {
                for exclude_first_scale in [false, true] {
                    variants.push(ScorerVariant { exclude_first_scale, ..main });
                }
            }
            _ => {}
        }
        variants.dedup();
        let mut scorers = Vec::new();
        for v in &variants {
            if !scorers.iter().any(|(w, _)| w == v) {
                scorers.push((*v, self.ensure_scorer(*v)?));
            }
        }
        let scorer = |v: ScorerVariant| &scorers.iter().find(|(w, _)| *w == v).unwrap().1;
        let lsrs = |v: ScorerVariant, cfg: LsrsConfig| Generator::Lsrs { scorer: scorer(v), config: cfg };
        let mut points = vec![SweepPoint {
            value: "baseline".into(),
            generator: Generator::Baseline,
        }];
        match axis {
            SweepAxis::M => {
                for &m in &c.eval.m_grid {
                    points.push(SweepPoint {
                        value: m.to_string(),
                        generator: lsrs(main, LsrsConfig::from_st_m(k, c.lsrs.st, m, Selection::Greedy)?),
                    });
                }
            }
            SweepAxis::St => {
                for &st in &c.eval.st_grid {
                    points.push(SweepPoint {
                        value: st.to_string(),
                        generator: lsrs(main, LsrsConfig::from_st_m(k, st, c.eval.sweep_m, Selection::Greedy)?),
                    });
                }
            }
            SweepAxis::TopK => {
                points.push(SweepPoint {
                    value: "greedy".into(),
                    generator: lsrs(main, LsrsConfig::from_st_m(k, c.lsrs.st, c.eval.sweep_m, Selection::Greedy)?),
                });
                for &k_sel in &c.eval.k_sel_grid {
                    points.push(SweepPoint {
                        value: k_sel.to_string(),
                        generator: lsrs(main, LsrsConfig::from_st_m(k, c.lsrs.st, c.eval.sweep_m, Selection::Topk { k_sel })?),
                    });
                }
            }
            SweepAxis::LossKind | SweepAxis::FirstScaleExclusion => {
                for v in variants.iter().skip(1) {
                    points.push(SweepPoint {
                        value: v.name(),
                        generator: lsrs(*v, LsrsConfig::from_st_m(k, c.lsrs.st, c.eval.sweep_m, Selection::Greedy)?),
                    });
                }
            }
        }
        let t0 = Instant::now();
        let rows = run_sweep(&ctx.stack(c), &points, c.eval.n_eval_samples, &c.eval.seeds, self.root_key())?;
        self.say(&format!("sweep {}: {} rows ({:.1?})", axis.label(), rows.len(), t0.elapsed()));

        let dir = self.workdir.join("sweeps");
        std::fs::create_dir_all(&dir)?;
        let name = axis.label();
        write_atomic(&dir.join(format!("{name}.csv")), sweep_csv(name, &rows).as_bytes())?;
        write_atomic(&dir.join(format!("{name}.timing.csv")), sweep_timing_csv(name, &rows).as_bytes())?;
        let summary = summarize_sweep(&rows);
        let mut checkpoints = ctx.hashes.clone();
        for (v, _) in &scorers {
            checkpoints.insert(scorer_stage(v), self.scorer_hash(*v)?);
        }
        let sidecar = json!({
            "axis": name,
            "seeds": c.eval.seeds,
            "n_samples": c.eval.n_eval_samples,
            "extractor_seed": c.eval.extractor_seed,
            "checkpoints": checkpoints,
            "config": c,
            "summary": summary,
        });
        write_atomic(&dir.join(format!("{name}.json")), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        if c.eval.svg {
            let labels: Vec<String> = summary.iter().map(|s| s.value.clone()).collect();
            let plots: [(&str, Vec<MeanStd>); 3] = [
                ("fid", summary.iter().map(|s| s.fid.clone()).collect()),
                ("validity", summary.iter().map(|s| s.validity.clone()).collect()),
                ("diversity", summary.iter().map(|s| s.diversity.clone()).collect()),
            ];
            for (metric, values) in plots {
                let svg = line_plot_svg(&format!("{metric} vs {name}"), &labels, &values);
                write_atomic(&dir.join(format!("{name}_{metric}.svg")), svg.as_bytes())?;
            }
        }
        Ok(rows)
    }

    /// Traces and wall-clock of sequential generation for every M in the
    /// grid.
    pub fn compute_runs(&self, ctx: &EvalContext, scorer: &ScoringModel) -> Result<ComputeReport> {
        let c = &self.config;
        let pool = self.root_key().derive_str("timing");
        let mut runs = Vec::new();
        for &m in &c.eval.m_grid {
            let cfg = LsrsConfig::from_st_m(c.scales(), c.lsrs.st, m, Selection::Greedy)?;
            let t0 = Instant::now();
            let traces = (0..c.eval.timing_samples)
                .map(|i| {
                    let class = i % c.world.classes;
                    Ok(lsrs_generate(&ctx.prior, scorer, class, &c.prior.sampler, &cfg, &ctx.book, &ctx.schedule, pool.derive(i as u64))?.1)
                })
                .collect::<Result<Vec<Trace>>>()?;
            runs.push((m, traces, t0.elapsed().as_secs_f64() * 1e3));
        }
        compute_report(&runs)
    }

    pub fn report(&self) -> Result<Report> {
        let ctx = self.eval_context()?;
        let c = &self.config;
        let main = self.main_variant();
        let scorer = self.load_scorer(main)?;
        let (_, val) = self.load_score_datasets()?;
        let mut scored = score_dataset(&scorer, &val, &ctx.book, &ctx.schedule)?;
        if main.exclude_first_scale {
            scored.retain(|p| p.scale >= 2);
        }
        let diagnostics = crate::eval::scorer_diagnostics(&scored, c.scales())?;
        let stack = ctx.stack(c);
        let cfg = c.lsrs_config()?;
        let mut baseline = Vec::new();
        let mut lsrs = Vec::new();
        for &seed in &c.eval.seeds {
            let pool = eval_pool_key(self.root_key(), seed);
            baseline.push(evaluate_generator(&stack, &Generator::Baseline, c.eval.n_eval_samples, pool)?);
            lsrs.push(evaluate_generator(
                &stack,
                &Generator::Lsrs {
                    scorer: &scorer,
                    config: cfg.clone(),
                },
                c.eval.n_eval_samples,
                pool,
            )?);
        }
        let compute = self.compute_runs(&ctx, &scorer)?;
        let mut checkpoints = ctx.hashes.clone();
        checkpoints.insert(scorer_stage(&main), self.scorer_hash(main)?);
        let report = Report {
            baseline,
            lsrs,
            seeds: c.eval.seeds.clone(),
            st: c.lsrs.st,
            m: c.lsrs.m,
            scorer: diagnostics,
            compute,
            checkpoints,
        };
        let dir = self.workdir.join("report");
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
        let mut csv = String::from("generator,seed,fid,mean_diff2,trace_term,validity,diversity,scorer_fwds,prior_fwds\n");
        for (name, rows) in [("baseline", &report.baseline), ("lsrs", &report.lsrs)] {
            for (seed, m) in c.eval.seeds.iter().zip(rows) {
                let _ = writeln!(
                    csv,
                    "{name},{seed},{},{},{},{},{},{},{}",
                    m.frechet.fid, m.frechet.mean_diff2, m.frechet.trace_term, m.validity, m.diversity, m.scorer_forwards, m.prior_forwards
                );
            }
        }
        write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;
        let mut acc = String::from("scale,accuracy,loss,mean_real,mean_generated\n");
        for s in &report.scorer.per_scale {
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(acc, "{},{},{},{},{}", s.scale, opt(s.accuracy), opt(s.loss), opt(s.mean_real), opt(s.mean_generated));
        }
        write_atomic(&dir.join("scorer.csv"), acc.as_bytes())?;
        Ok(report)
    }

    /// Every training stage in order.
    pub fn prepare(&self) -> Result<()> {
        self.gen_data()?;
        self.fit_codebook()?;
        self.train_prior()?;
        self.build_score_dataset()?;
        self.train_scorer()?;
        Ok(())
    }
}

/// Generated images of a configuration, for callers that need the samples
/// themselves rather than metrics.
pub fn generated_images(stack: &EvalStack, generator: &Generator, n: usize, pool: StreamKey) -> Result<Vec<(usize, FeatureMap)>> {
    let set = generate_set(stack, generator, n, pool)?;
    Ok(set.classes.into_iter().zip(set.images).collect())
}

