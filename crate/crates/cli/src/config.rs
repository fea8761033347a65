//! Run configuration: built-in defaults, overridden by a TOML file, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use relpos::attention::EncoderConfig;
use relpos::posembed::{MethodKind, PositionMethod, DEFAULT_CLIP_K};
use relpos::tasks::{Experiment, Schedule, TaskKind, TaskSpec};
use relpos::tensor::OptimizerConfig;
use relpos::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Upper bound on concurrently trained models (sweeps only).
    pub workers: usize,
    pub model: ModelSection,
    pub task: TaskSection,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("runs"),
            workers: 1,
            model: ModelSection::default(),
            task: TaskSection::default(),
            optimizer: OptimizerSection::default(),
            schedule: ScheduleSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub d_z: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub method: String,
    /// Unset means the method's default (32, capped at `max_len − 1`).
    pub clip_k: Option<usize>,
    pub xlnet_bias: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_z: 16,
            max_len: 64,
            vocab: 32,
            method: MethodKind::Method4.name().to_string(),
            clip_k: None,
            xlnet_bias: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub offset: i64,
    pub mask_rate: f64,
    pub train_len: [usize; 2],
    pub eval_lens: Vec<usize>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::OffsetCopy,
            offset: 2,
            mask_rate: 0.15,
            train_len: [8, 32],
            eval_lens: vec![32, 64],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 300,
            batch_size: 32,
            eval_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            k_values: vec![2, 8, 16, 31],
            seeds: vec![1, 2, 3],
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<String>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub max_len: Option<usize>,
    pub eval_lens: Option<Vec<usize>>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// Parses `"32,64, 128"`.
pub fn parse_lens(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad length {p:?} in {s:?}")))
        })
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults, then `file` if given, then `overrides`; validated.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = &o.method {
            self.model.method = m.clone();
        }
        if let Some(k) = o.k {
            self.model.clip_k = Some(k);
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(n) = o.max_len {
            self.model.max_len = n;
        }
        if let Some(l) = &o.eval_lens {
            self.task.eval_lens = l.clone();
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
    }

    pub fn method_kind(&self) -> Result<MethodKind> {
        self.model.method.parse()
    }

    pub fn position_method(&self) -> Result<PositionMethod> {
        let kind = self.method_kind()?;
        let clip_k = match self.model.clip_k {
            Some(k) => Some(k),
            None if kind.accepts_clip() => Some(DEFAULT_CLIP_K.min(self.model.max_len.saturating_sub(1)).max(1)),
            None => None,
        };
        Ok(PositionMethod {
            kind,
            clip_k,
            xlnet_bias_enabled: self.model.xlnet_bias,
        })
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let m = &self.model;
        Ok(EncoderConfig::new(m.layers, m.heads, m.d_z, m.max_len, m.vocab, self.position_method()?))
    }

    pub fn task_spec(&self) -> TaskSpec {
        let t = &self.task;
        let range = (t.train_len[0], t.train_len[1]);
        match t.kind {
            TaskKind::OffsetCopy => TaskSpec::offset_copy(self.model.vocab, t.offset, range, t.eval_lens.clone()),
            TaskKind::MaskedLm => TaskSpec::masked_lm(self.model.vocab, t.mask_rate, range, t.eval_lens.clone()),
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        match o.kind {
            OptimizerKind::Adam => OptimizerConfig::Adam {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
            OptimizerKind::Sgd => OptimizerConfig::Sgd {
                lr: o.lr,
                momentum: o.momentum,
            },
        }
    }

    pub fn schedule(&self) -> Schedule {
        let s = &self.schedule;
        Schedule {
            epochs: s.epochs,
            steps_per_epoch: s.steps_per_epoch,
            batch_size: s.batch_size,
            eval_batch: s.eval_batch,
        }
    }

    pub fn experiment(&self) -> Result<Experiment> {
        Ok(Experiment {
            encoder: self.encoder_config()?,
            task: self.task_spec(),
            optimizer: self.optimizer_config(),
            schedule: self.schedule(),
            seed: self.seed,
        })
    }

    /// Checks every field; nothing is allocated before this passes.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.model.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps.is_nan() || o.eps <= 0.0 {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", o.momentum)));
        }
        if self.schedule.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.task.eval_lens.is_empty() {
            return Err(Error::Config("eval_lens must not be empty".into()));
        }
        self.experiment()?.validate()
    }

    /// The extra checks `sweep-k` needs; other commands ignore `[sweep]`.
    pub fn validate_sweep(&self) -> Result<()> {
        let base = self.position_method()?;
        if !base.kind.accepts_clip() {
            return Err(Error::Config(format!("{} has no clip distance to sweep", base.kind)));
        }
        if self.sweep.k_values.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one k and one seed".into()));
        }
        for &k in &self.sweep.k_values {
            PositionMethod { clip_k: Some(k), ..base }.validate(self.model.max_len)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_toy_setup() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let e = cfg.encoder_config().unwrap();
        assert_eq!((e.layers, e.heads, e.d_x, e.d_z, e.max_len, e.vocab), (2, 2, 32, 16, 64, 32));
        assert_eq!(e.method.clip_k, Some(32));
        assert_eq!(cfg.optimizer_config(), OptimizerConfig::adam(1e-4));
        assert_eq!(cfg.schedule().total_steps(), 3000);
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let mut cfg = RunConfig::from_toml("seed = 9\n[model]\nmethod = \"shaw\"\nclip_k = 4\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.layers, 2);
        cfg.apply(&Overrides {
            k: Some(6),
            seed: Some(3),
            eval_lens: Some(vec![16]),
            ..Default::default()
        });
        assert_eq!((cfg.seed, cfg.model.clip_k), (3, Some(6)));
        assert_eq!(cfg.model.method, "shaw");
        assert_eq!(cfg.task.eval_lens, vec![16]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nlayer = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[tsak]"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = [
            "workers = 0",
            "[model]\nmethod = \"method9\"",
            "[model]\nclip_k = 64",
            "[model]\nmethod = \"method1\"\nclip_k = 3",
            "[model]\nmethod = \"shaw\"\nxlnet_bias = true",
            "[optimizer]\nlr = -1.0",
            "[task]\noffset = 8",
            "[task]\ntrain_len = [8, 100]",
            "[task]\nkind = \"masked_lm\"\nmask_rate = 1.5",
        ];
        for text in bad {
            let cfg = RunConfig::from_toml(text).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_) | Error::Task(_))), "{text}");
        }
    }

    #[test]
    fn sweep_settings_only_matter_to_sweeps() {
        let cfg = RunConfig::from_toml("[model]\nmax_len = 12\nclip_k = 4\n[task]\ntrain_len = [4, 12]").unwrap();
        cfg.validate().unwrap();
        assert!(matches!(cfg.validate_sweep(), Err(Error::Config(_))));
        for text in ["[sweep]\nk_values = [0]", "[sweep]\nseeds = []", "[model]\nmethod = \"method1\""] {
            let cfg = RunConfig::from_toml(text).unwrap();
            assert!(matches!(cfg.validate_sweep(), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.model.clip_k = Some(8);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn lens_parse() {
        assert_eq!(parse_lens("32, 64").unwrap(), vec![32, 64]);
        assert!(parse_lens("32,x").is_err());
    }
}
