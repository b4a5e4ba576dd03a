//! Run configuration: one JSON document with a section per pipeline stage.
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsrs::{LossKind, LsrsConfig, ScorerConfig, ScorerTrainConfig, Selection};
use crate::msvq::ScaleSchedule;
use crate::prior::{PriorConfig, PriorTrainConfig, SamplerConfig};
use crate::synth::{PatternKind, Split};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Free-form note, ignored by the pipeline.
    pub about: String,
    pub world: WorldSection,
    pub msvq: MsvqSection,
    pub prior: PriorSection,
    pub lsrs: LsrsSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub classes: usize,
    pub canvas: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub eval_per_class: usize,
    pub seed: u64,
    pub calibration_samples: usize,
    pub calibration_quantile: f64,
    /// Relative slack added on top of the calibrated quantile.
    pub threshold_margin: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            classes: PatternKind::ALL.len(),
            canvas: 32,
            channels: 4,
            train_per_class: 2000,
            val_per_class: 50,
            eval_per_class: 50,
            seed: 1,
            calibration_samples: 1000,
            calibration_quantile: 0.995,
            threshold_margin: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsvqSection {
    pub vocab: usize,
    /// Square side of each scale, coarse to fine; the last equals the canvas.
    pub schedule: Vec<usize>,
    /// Corpus maps used for codebook fitting.
    pub fit_samples: usize,
    pub seed: u64,
}

impl Default for MsvqSection {
    fn default() -> Self {
        MsvqSection {
            vocab: 64,
            schedule: vec![1, 2, 4, 8, 16, 32],
            fit_samples: 600,
            seed: 5,
        }
    }
}

impl MsvqSection {
    pub fn schedule(&self) -> Result<ScaleSchedule> {
        ScaleSchedule::new(self.schedule.iter().map(|&s| (s, s)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub width: usize,
    pub blocks: usize,
    pub trunk_resolution: usize,
    pub train: PriorTrainConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            width: 24,
            blocks: 3,
            trunk_resolution: 8,
            train: PriorTrainConfig {
                epochs: 12,
                batch: 32,
                base_rate: 2e-3,
                warmup_fraction: 0.05,
                class_drop_p: 0.1,
            },
            sampler: SamplerConfig::new(64),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsrsSection {
    /// Generated negative trajectories per class.
    pub n_gen_per_class: usize,
    /// Encoded real trajectories per class, taken from the train split.
    pub n_real_per_class: usize,
    /// Generated negatives per class in the held-out validation set.
    pub val_gen_per_class: usize,
    pub widths: Vec<usize>,
    pub feature_channels: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub train: ScorerTrainConfig,
    pub seed: u64,
    pub st: usize,
    pub m: usize,
    pub selection: Selection,
}

impl Default for LsrsSection {
    fn default() -> Self {
        LsrsSection {
            n_gen_per_class: 400,
            n_real_per_class: 400,
            val_gen_per_class: 50,
            widths: vec![16, 32, 64, 128],
            feature_channels: 256,
            embed_dim: 128,
            hidden: vec![256, 64],
            train: ScorerTrainConfig::default(),
            seed: 0,
            st: 2,
            m: 8,
            selection: Selection::Greedy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub extractor_seed: u64,
    /// Generated samples per configuration and seed.
    pub n_eval_samples: usize,
    pub seeds: Vec<u64>,
    pub m_grid: Vec<usize>,
    pub st_grid: Vec<usize>,
    pub k_sel_grid: Vec<usize>,
    /// Candidates per active scale for the ST, top-k, loss and exclusion
    /// sweeps.
    pub sweep_m: usize,
    pub ablation_samples: usize,
    /// Images per M for the compute report.
    pub timing_samples: usize,
    pub svg: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            extractor_seed: 17,
            n_eval_samples: 400,
            seeds: vec![0, 1, 2],
            m_grid: vec![1, 2, 4, 8, 16],
            st_grid: vec![1, 2, 3, 4, 7],
            k_sel_grid: vec![1, 2, 4],
            sweep_m: 8,
            ablation_samples: 200,
            timing_samples: 16,
            svg: true,
        }
    }
}

fn bad<T>(key: &str, constraint: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        key: key.into(),
        constraint: constraint.into(),
    })
}

impl RunConfig {
    /// Parse and validate; an empty or whitespace-only document yields the
    /// defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = if text.trim().is_empty() {
            RunConfig::default()
        } else {
            let mut de = serde_json::Deserializer::from_str(text);
            let config = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Config {
                key: match e.path().to_string() {
                    p if p == "." => "<document>".into(),
                    p => p,
                },
                constraint: e.inner().to_string(),
            })?;
            de.end().map_err(|e| Error::Config {
                key: "<document>".into(),
                constraint: e.to_string(),
            })?;
            config
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn scales(&self) -> usize {
        self.msvq.schedule.len()
    }

    pub fn splits(&self) -> Vec<(Split, usize)> {
        vec![
            (Split::Train, self.world.train_per_class),
            (Split::Val, self.world.val_per_class),
            (Split::Eval, self.world.eval_per_class),
        ]
    }

    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            n_classes: self.world.classes,
            vocab: self.msvq.vocab,
            channels: self.world.channels,
            scales: self.scales(),
            width: self.prior.width,
            blocks: self.prior.blocks,
            trunk_resolution: self.prior.trunk_resolution,
        }
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            n_classes: self.world.classes,
            scales: self.scales(),
            channels: self.world.channels,
            canvas: self.world.canvas,
            widths: self.lsrs.widths.clone(),
            feature_channels: self.lsrs.feature_channels,
            embed_dim: self.lsrs.embed_dim,
            hidden: self.lsrs.hidden.clone(),
        }
    }

    pub fn lsrs_config(&self) -> Result<LsrsConfig> {
        LsrsConfig::from_st_m(self.scales(), self.lsrs.st, self.lsrs.m, self.lsrs.selection)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if w.classes == 0 || w.classes > PatternKind::ALL.len() {
            return bad("world.classes", format!("must be in [1, {}]", PatternKind::ALL.len()));
        }
        if w.canvas == 0 || w.canvas % 8 != 0 {
            return bad("world.canvas", "must be a positive multiple of 8");
        }
        if w.channels == 0 {
            return bad("world.channels", "must be ≥ 1");
        }
        if w.train_per_class == 0 || w.val_per_class < 2 || w.eval_per_class < 2 {
            return bad("world.train_per_class", "train ≥ 1, val ≥ 2 and eval ≥ 2 per class");
        }
        if w.calibration_samples == 0 {
            return bad("world.calibration_samples", "must be ≥ 1");
        }
        if !(w.calibration_quantile > 0.0 && w.calibration_quantile <= 1.0) {
            return bad("world.calibration_quantile", "must be in (0, 1]");
        }
        if !(w.threshold_margin >= 0.0 && w.threshold_margin.is_finite()) {
            return bad("world.threshold_margin", "must be finite and ≥ 0");
        }

        let schedule = self.msvq.schedule().map_err(|e| Error::Config {
            key: "msvq.schedule".into(),
            constraint: e.to_string(),
        })?;
        if schedule.full() != (w.canvas, w.canvas) {
            return bad("msvq.schedule", format!("last scale must equal the canvas side {}", w.canvas));
        }
        if self.msvq.vocab < 2 || self.msvq.vocab > u16::MAX as usize + 1 {
            return bad("msvq.vocab", "must be in [2, 65536]");
        }
        if self.msvq.fit_samples == 0 {
            return bad("msvq.fit_samples", "must be ≥ 1");
        }

        self.prior_config().validate()?;
        let t = &self.prior.train;
        if t.epochs == 0 || t.batch == 0 {
            return bad("prior.train", "epochs and batch must be ≥ 1");
        }
        if !(t.base_rate > 0.0 && t.base_rate.is_finite()) {
            return bad("prior.train.base_rate", "must be finite and > 0");
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) {
            return bad("prior.train.warmup_fraction", "must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&t.class_drop_p) {
            return bad("prior.train.class_drop_p", "must be in [0, 1]");
        }
        self.prior.sampler.validate().map_err(|e| Error::Config {
            key: "prior.sampler".into(),
            constraint: e.to_string(),
        })?;

        let l = &self.lsrs;
        if l.n_gen_per_class == 0 || l.n_real_per_class == 0 || l.val_gen_per_class == 0 {
            return bad("lsrs.n_gen_per_class", "generated, real and validation counts must be ≥ 1");
        }
        if l.n_real_per_class > w.train_per_class {
            return bad("lsrs.n_real_per_class", format!("must not exceed world.train_per_class = {}", w.train_per_class));
        }
        self.scorer_config().validate()?;
        let st = &l.train;
        if st.epochs == 0 || st.batch < 2 {
            return bad("lsrs.train", "epochs ≥ 1 and batch ≥ 2");
        }
        if !(st.base_rate > 0.0 && st.base_rate.is_finite()) {
            return bad("lsrs.train.base_rate", "must be finite and > 0");
        }
        if st.warmup_epochs >= st.epochs {
            return bad("lsrs.train.warmup_epochs", "must be below lsrs.train.epochs");
        }
        if st.exclude_first_scale && self.scales() < 2 {
            return bad("lsrs.train.exclude_first_scale", "needs at least two scales");
        }
        if l.st == 0 || l.st > self.scales() + 1 {
            return bad("lsrs.st", format!("must be in [1, {}]", self.scales() + 1));
        }
        if l.m == 0 {
            return bad("lsrs.m", "must be ≥ 1");
        }
        if let Selection::Topk { k_sel: 0 } = l.selection {
            return bad("lsrs.selection.k_sel", "must be ≥ 1");
        }

        let e = &self.eval;
        if e.n_eval_samples < 2 {
            return bad("eval.n_eval_samples", "must be ≥ 2");
        }
        if e.seeds.is_empty() {
            return bad("eval.seeds", "need at least one seed");
        }
        if e.m_grid.is_empty() || e.m_grid.contains(&0) {
            return bad("eval.m_grid", "nonempty, every M ≥ 1");
        }
        if e.st_grid.is_empty() || e.st_grid.iter().any(|&s| s == 0 || s > self.scales() + 1) {
            return bad("eval.st_grid", format!("nonempty, every ST in [1, {}]", self.scales() + 1));
        }
        if e.k_sel_grid.is_empty() || e.k_sel_grid.contains(&0) {
            return bad("eval.k_sel_grid", "nonempty, every k_sel ≥ 1");
        }
        if e.sweep_m == 0 || e.ablation_samples == 0 || e.timing_samples == 0 {
            return bad("eval.sweep_m", "sweep_m, ablation_samples and timing_samples must be ≥ 1");
        }
        Ok(())
    }
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Pairwise => "pairwise",
            LossKind::Pointwise => "pointwise",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_json(" {} ").unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.about = "desk".into();
        c.lsrs.selection = Selection::Topk { k_sel: 3 };
        c.prior.sampler.top_p = 0.9;
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn constraint_errors_name_the_key() {
        let err = RunConfig::from_json(r#"{"lsrs": {"st": 0}}"#).unwrap_err().to_string();
        assert!(err.contains("lsrs.st"), "{err}");
        let err = RunConfig::from_json(r#"{"lsrs": {"st": 8}}"#).unwrap_err().to_string();
        assert!(err.contains("lsrs.st"), "{err}");
        let err = RunConfig::from_json(r#"{"world": {"colour": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
        let err = RunConfig::from_json(r#"{"prior": {"width": "wide"}}"#).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
        let err = RunConfig::from_json(r#"{"msvq": {"schedule": [1, 2, 4]}}"#).unwrap_err().to_string();
        assert!(err.contains("msvq.schedule"), "{err}");
    }
}
