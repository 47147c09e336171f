//! Run configuration: a JSON file with command-line overrides on top.
//!
//! Every key is optional. Defaults:
//!
//! | key          | default                                   |
//! |--------------|-------------------------------------------|
//! | `seed`       | 0, drives synthesis, initialization, shuffling and dropout |
//! | `out`        | `"out"`                                   |
//! | `data`       | none; a directory written by `synth-gen`  |
//! | `checkpoint` | none                                      |
//! | `split`      | `"test"`                                  |
//! | `precision`  | none; training runs in `"f32"` unless `"f64"` is requested |
//! | `threshold`  | 0.5                                       |
//! | `model`      | d=128, 4 heads, 16 frames, JAAD           |
//! | `train`      | lr 5e-7, 60 epochs, batch 2, ratio class weighting; no `seed` key |
//! | `sampler`    | 16 frames, overlap 0.8, TTE 30..=60       |
//! | `synth`      | 200 tracks of 60..=120 frames, multi-context rule, noise 0.05 |
//! | `variants`   | all six                                   |
//! | `grad_check` | toy model, 2 clips, step 1e-5, tolerance 1e-4 |

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mft::ingest::{Flavor, SamplerConfig};
use mft::model::MftConfig;
use mft::synth::{ScenarioRule, SynthConfig};
use mft::train::TrainConfig;
use mft::{MftError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    MultiContext,
    EnvironmentOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub n_tracks: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub rule: RuleKind,
    pub noise: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let base = SynthConfig::default();
        SynthSettings {
            n_tracks: base.n_tracks,
            min_frames: base.min_frames,
            max_frames: base.max_frames,
            rule: RuleKind::MultiContext,
            noise: 0.05,
        }
    }
}

impl SynthSettings {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_tracks: self.n_tracks,
            min_frames: self.min_frames,
            max_frames: self.max_frames,
        }
    }

    pub fn rule(&self) -> ScenarioRule {
        match self.rule {
            RuleKind::MultiContext => ScenarioRule::multi_context(self.noise),
            RuleKind::EnvironmentOnly => ScenarioRule::environment_only(self.noise),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSettings {
    /// Defaults to the toy model of the run's flavor.
    pub model: Option<MftConfig>,
    pub clips: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            model: None,
            clips: 2,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub precision: Option<Precision>,
    pub threshold: f64,
    pub model: MftConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub synth: SynthSettings,
    pub variants: Vec<String>,
    pub grad_check: GradCheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: None,
            checkpoint: None,
            split: Split::Test,
            precision: None,
            threshold: 0.5,
            model: MftConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            synth: SynthSettings::default(),
            variants: Vec::new(),
            grad_check: GradCheckSettings::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub flavor: Option<Flavor>,
    pub tte_min: Option<i64>,
    pub tte_max: Option<i64>,
    pub variants: Vec<String>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Option<Split>,
}

/// A resolved configuration plus which settings the user gave explicitly.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub run: RunConfig,
    pub flavor_explicit: bool,
    pub model_explicit: bool,
    /// TTE bounds given on the command line.
    pub tte: (Option<i64>, Option<i64>),
}

pub fn parse_config(text: &str) -> Result<(RunConfig, serde_json::Value)> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| MftError::Config(format!("config: {e}")))?;
    if raw.pointer("/train/seed").is_some() {
        return Err(MftError::Config(
            "config: set the top-level \"seed\" instead of \"train.seed\"".into(),
        ));
    }
    let run = serde_json::from_value(raw.clone())
        .map_err(|e| MftError::Config(format!("config: {e}")))?;
    Ok((run, raw))
}

pub fn resolve(path: Option<&Path>, overrides: Overrides) -> Result<Resolved> {
    let (mut run, raw) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| MftError::Config(format!("cannot read {}: {e}", p.display())))?;
            parse_config(&text)?
        }
        None => (RunConfig::default(), serde_json::Value::Null),
    };
    let model_explicit = raw.get("model").is_some();
    let mut flavor_explicit = raw.pointer("/model/flavor").is_some();
    if let Some(seed) = overrides.seed {
        run.seed = seed;
    }
    if let Some(out) = overrides.out {
        run.out = out;
    }
    if let Some(flavor) = overrides.flavor {
        run.model.flavor = flavor;
        flavor_explicit = true;
        if let Some(m) = run.grad_check.model.as_mut() {
            m.flavor = flavor;
        }
    }
    let tte = (overrides.tte_min, overrides.tte_max);
    if let Some(t) = overrides.tte_min {
        run.sampler.tte_min = t;
    }
    if let Some(t) = overrides.tte_max {
        run.sampler.tte_max = t;
    }
    if !overrides.variants.is_empty() {
        run.variants = overrides.variants;
    }
    if overrides.checkpoint.is_some() {
        run.checkpoint = overrides.checkpoint;
    }
    if overrides.data.is_some() {
        run.data = overrides.data;
    }
    if let Some(s) = overrides.split {
        run.split = s;
    }
    run.train.seed = run.seed;
    Ok(Resolved {
        run,
        flavor_explicit,
        model_explicit,
        tte,
    })
}
