//! `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use avcap::data::{FramePeriods, SyntheticSpec};
use avcap::model::ModelConfig;
use avcap::training::TrainConfig;
use avcap::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub split: Split,
    pub threshold: f64,
    pub thresholds: Vec<f64>,
    pub beam: usize,
    pub synth: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            split: Split::Valid,
            threshold: 0.5,
            thresholds: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            beam: 1,
            synth: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            teacher_epochs: 30,
            student_epochs: 60,
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value {value:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| num(key, v)).collect()
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn periods(&self) -> FramePeriods {
        self.synth.periods
    }

    /// Applies one setting. Unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if let Some(k) = key.strip_prefix("model.") {
            if k == "vocab_size" {
                return Err(Error::Config("model.vocab_size is taken from the dataset".into()));
            }
            if self.model.set(k, value)? {
                return Ok(());
            }
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "split" => {
                self.split = match value {
                    "train" => Split::Train,
                    "valid" => Split::Valid,
                    _ => return Err(bad(key, value)),
                }
            }
            "threshold" => self.threshold = num(key, value)?,
            "thresholds" => self.thresholds = list(key, value)?,
            "beam" => self.beam = num(key, value)?,
            "data.n_train" => s.n_train = num(key, value)?,
            "data.n_valid" => s.n_valid = num(key, value)?,
            "data.n_classes" => s.n_classes = num(key, value)?,
            "data.slot_arity" => s.slot_arity = num(key, value)?,
            "data.clip_min" => s.clip_min = num(key, value)?,
            "data.clip_max" => s.clip_max = num(key, value)?,
            "data.cue_min" => s.cue_min = num(key, value)?,
            "data.cue_max" => s.cue_max = num(key, value)?,
            "data.cue_audio" => s.cue_mix[0] = num(key, value)?,
            "data.cue_visual" => s.cue_mix[1] = num(key, value)?,
            "data.cue_both" => s.cue_mix[2] = num(key, value)?,
            "data.noise" => s.noise = num(key, value)?,
            "data.lead_max" => s.lead_max = num(key, value)?,
            "data.tail_max" => s.tail_max = num(key, value)?,
            "data.p_audio" => s.periods.audio = num(key, value)?,
            "data.p_visual" => s.periods.visual = num(key, value)?,
            "train.alpha" => t.alpha = num(key, value)?,
            "train.beta" => t.beta = num(key, value)?,
            "train.gamma" => t.gamma = num(key, value)?,
            "train.sim_threshold" => t.sim_threshold = num(key, value)?,
            "train.label_smoothing" => t.label_smoothing = num(key, value)?,
            "train.lr" => t.adam.lr = num(key, value)?,
            "train.warmup" => t.adam.warmup = num(key, value)?,
            "train.clip" => t.adam.clip = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "train.eval_threshold" => t.eval_threshold = num(key, value)?,
            "train.teacher_epochs" => self.teacher_epochs = num(key, value)?,
            "train.student_epochs" => self.student_epochs = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            c.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("config line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every setting, in a form [`RunConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.display().to_string());
        kv("split", match self.split { Split::Train => "train", Split::Valid => "valid" }.into());
        kv("threshold", self.threshold.to_string());
        kv("thresholds", join(&self.thresholds));
        kv("beam", self.beam.to_string());
        kv("data.n_train", s.n_train.to_string());
        kv("data.n_valid", s.n_valid.to_string());
        kv("data.n_classes", s.n_classes.to_string());
        kv("data.slot_arity", s.slot_arity.to_string());
        kv("data.clip_min", s.clip_min.to_string());
        kv("data.clip_max", s.clip_max.to_string());
        kv("data.cue_min", s.cue_min.to_string());
        kv("data.cue_max", s.cue_max.to_string());
        kv("data.cue_audio", s.cue_mix[0].to_string());
        kv("data.cue_visual", s.cue_mix[1].to_string());
        kv("data.cue_both", s.cue_mix[2].to_string());
        kv("data.noise", s.noise.to_string());
        kv("data.lead_max", s.lead_max.to_string());
        kv("data.tail_max", s.tail_max.to_string());
        kv("data.p_audio", s.periods.audio.to_string());
        kv("data.p_visual", s.periods.visual.to_string());
        for (k, v) in self.model.to_pairs() {
            if k != "vocab_size" {
                kv(&format!("model.{k}"), v);
            }
        }
        kv("train.alpha", t.alpha.to_string());
        kv("train.beta", t.beta.to_string());
        kv("train.gamma", t.gamma.to_string());
        kv("train.sim_threshold", t.sim_threshold.to_string());
        kv("train.label_smoothing", t.label_smoothing.to_string());
        kv("train.lr", t.adam.lr.to_string());
        kv("train.warmup", t.adam.warmup.to_string());
        kv("train.clip", t.adam.clip.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.eval_threshold", t.eval_threshold.to_string());
        kv("train.teacher_epochs", self.teacher_epochs.to_string());
        kv("train.student_epochs", self.student_epochs.to_string());
        out
    }

    /// Training settings for a run of `epochs` epochs.
    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: self.seed,
            eval_beam: self.beam,
            ..self.train.clone()
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }
}
