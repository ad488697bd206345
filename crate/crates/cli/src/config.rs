//! Versioned TOML run configuration.
//!
//! Relative paths inside the file resolve against the directory that holds
//! the file. `out_dir` follows the same rule unless `--out` replaces it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tta_core::allocation::{PolicyKind, SchedulePolicy, DEFAULT_ALPHA_SMOOTH, DEFAULT_DUALITY_DRAWS};
use tta_core::data::CorpusSpec;
use tta_core::guidance::LexicalConstraint;
use tta_core::models::train::{ReduceConfig, TrainConfig};
use tta_core::models::{ClassifierConfig, DenoiserConfig};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; every stage derives its streams from it.
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub reduce: ReduceSection,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
    #[serde(default)]
    pub duality: DualitySection,
    #[serde(skip)]
    base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Corpus JSONL file. When absent the corpus is synthesized from `spec`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Fraction of examples in the training split.
    pub split: f64,
    pub split_seed: u64,
    pub spec: CorpusSpec,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            split: 0.8,
            split_seed: 1,
            spec: CorpusSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub t_max: usize,
    pub s: f64,
    #[serde(rename = "K")]
    pub k: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t_max: 64,
            s: 0.008,
            k: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub time_features: usize,
    pub positional: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            d_model: d.d_model,
            heads: d.heads,
            d_ff: d.d_ff,
            blocks: d.blocks,
            time_features: d.time_features,
            positional: d.positional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub d_hidden: usize,
    pub temperature: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        Self {
            d_hidden: c.d_hidden,
            temperature: c.temperature,
        }
    }
}

/// Optimizer settings for one model. Seeds come from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_prefix: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self::from(TrainConfig::default())
    }
}

impl From<TrainConfig> for Hyper {
    fn from(c: TrainConfig) -> Self {
        Self {
            steps: c.steps,
            batch_size: c.batch_size,
            lr: c.lr,
            max_prefix: c.max_prefix,
            clip: c.clip,
        }
    }
}

impl Hyper {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            max_prefix: self.max_prefix,
            clip: self.clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub denoiser: Hyper,
    pub classifier: Hyper,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            denoiser: Hyper::default(),
            classifier: Hyper {
                steps: 1500,
                ..Hyper::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    pub sampled_steps: usize,
    pub prompt_len: usize,
    pub top_p: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let r = ReduceConfig::default();
        Self {
            steps: r.steps,
            batch_size: r.batch_size,
            lr: r.lr,
            clip: r.clip,
            sampled_steps: r.sampled_steps,
            prompt_len: r.prompt_len,
            top_p: r.top_p,
        }
    }
}

impl FinetuneSection {
    pub fn to_reduce_config(&self, seed: u64) -> ReduceConfig {
        ReduceConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            clip: self.clip,
            sampled_steps: self.sampled_steps,
            prompt_len: self.prompt_len,
            top_p: self.top_p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    /// Step ratios relative to the teacher's `T`, strictly decreasing. Each
    /// student starts from the previous one.
    pub ladder: Vec<f64>,
    /// Held-out sequences used for the cross-entropy report.
    pub eval_sequences: usize,
    pub finetune: FinetuneSection,
}

impl Default for ReduceSection {
    fn default() -> Self {
        Self {
            teacher: None,
            ladder: vec![0.5, 0.25],
            eval_sequences: 256,
            finetune: FinetuneSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier: Option<PathBuf>,
    /// Generations per run; sample `i` of every run uses the same seed.
    pub samples: usize,
    pub steps: usize,
    pub top_p: f64,
    pub prompt: Vec<usize>,
    /// Guidance strengths; one run per (policy, lambda) pair.
    pub lambdas: Vec<f64>,
    pub target_label: String,
    pub iterations: usize,
    pub window: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constraint: Option<LexicalConstraint>,
    pub policies: Vec<SchedulePolicy>,
}

pub const DEFAULT_LAMBDA: f64 = 1e5;

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            denoiser: None,
            classifier: None,
            samples: 200,
            steps: 64,
            top_p: 0.9,
            prompt: Vec::new(),
            lambdas: vec![0.0, DEFAULT_LAMBDA],
            target_label: "positive".into(),
            iterations: 1,
            window: 1.0,
            threads: None,
            constraint: None,
            policies: vec![
                SchedulePolicy::new(PolicyKind::Constant),
                SchedulePolicy::adaptive(DEFAULT_ALPHA_SMOOTH),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Output directory of a `generate` stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traces: Option<PathBuf>,
    pub key_tokens: usize,
    pub bins: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            traces: None,
            key_tokens: tta_core::guidance::KEY_TOKENS,
            bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualitySection {
    pub vocab: usize,
    /// Number of evenly spaced `alpha_bar` values in `[0, 1]`.
    pub grid: usize,
    pub draws: usize,
}

impl Default for DualitySection {
    fn default() -> Self {
        Self {
            vocab: 64,
            grid: 11,
            draws: DEFAULT_DUALITY_DRAWS,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            corpus: CorpusSection::default(),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            classifier: ClassifierSection::default(),
            train: TrainSection::default(),
            reduce: ReduceSection::default(),
            generate: GenerateSection::default(),
            analyze: AnalyzeSection::default(),
            duality: DualitySection::default(),
            base_dir: PathBuf::new(),
        }
    }
}

fn check(ok: bool, field: &str, reason: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(field, reason()))
    }
}

fn check_hyper(h: &Hyper, field: &str) -> Result<()> {
    check(h.batch_size > 0, &format!("{field}.batch_size"), || "must be >= 1".into())?;
    check(h.lr > 0.0 && h.lr.is_finite(), &format!("{field}.lr"), || format!("must be > 0, got {}", h.lr))?;
    if let Some(c) = h.clip {
        check(c > 0.0, &format!("{field}.clip"), || format!("must be > 0, got {c}"))?;
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let key = first_key(e.message());
            let field = if key.is_empty() { "config".to_string() } else { key };
            CliError::config(field, e.to_string().trim().to_string())
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: &Path) {
        self.base_dir = dir.to_path_buf();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    /// Resolves a path field and requires it to exist.
    pub fn existing(&self, field: &str, p: Option<&PathBuf>) -> Result<PathBuf> {
        let p = p.ok_or_else(|| CliError::config(field, "required for this command"))?;
        let full = self.resolve(p);
        if !full.exists() {
            return Err(CliError::config(field, format!("{} does not exist", full.display())));
        }
        Ok(full)
    }

    pub fn label_index(&self) -> Result<usize> {
        self.corpus
            .spec
            .labels
            .iter()
            .position(|l| *l == self.generate.target_label)
            .ok_or_else(|| {
                CliError::config(
                    "generate.target_label",
                    format!(
                        "{:?} is not one of {:?}",
                        self.generate.target_label, self.corpus.spec.labels
                    ),
                )
            })
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: self.corpus.spec.vocab_size,
            max_len: self.corpus.spec.seq_len,
            d_model: self.model.d_model,
            heads: self.model.heads,
            d_ff: self.model.d_ff,
            blocks: self.model.blocks,
            time_features: self.model.time_features,
            positional: self.model.positional,
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            vocab_size: self.corpus.spec.vocab_size,
            d_hidden: self.classifier.d_hidden,
            num_labels: self.corpus.spec.labels.len(),
            temperature: self.classifier.temperature,
        }
    }

    /// Checks every field-level invariant. Path existence is checked by the
    /// command that reads the path.
    pub fn validate(&self) -> Result<()> {
        check(self.schema_version == SCHEMA_VERSION, "schema_version", || {
            format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version)
        })?;
        let c = &self.corpus;
        check(c.split > 0.0 && c.split < 1.0, "corpus.split", || {
            format!("must be in (0, 1), got {}", c.split)
        })?;
        c.spec.validate().map_err(|e| CliError::config("corpus.spec", e.to_string()))?;

        let s = &self.schedule;
        check(s.t_max >= 1, "schedule.T", || "must be >= 1".into())?;
        check(s.s >= 0.0 && s.s.is_finite(), "schedule.s", || format!("must be >= 0, got {}", s.s))?;
        check(s.k > 0.0 && s.k.is_finite(), "schedule.K", || format!("must be > 0, got {}", s.k))?;

        self.denoiser_config().validate().map_err(|e| CliError::config("model", e.to_string()))?;
        self.classifier_config()
            .validate()
            .map_err(|e| CliError::config("classifier", e.to_string()))?;
        check_hyper(&self.train.denoiser, "train.denoiser")?;
        check_hyper(&self.train.classifier, "train.classifier")?;

        let r = &self.reduce;
        for (i, &ratio) in r.ladder.iter().enumerate() {
            check(ratio > 0.0 && ratio <= 1.0, &format!("reduce.ladder[{i}]"), || {
                format!("ratio must be in (0, 1], got {ratio}")
            })?;
            if i > 0 {
                check(ratio < r.ladder[i - 1], &format!("reduce.ladder[{i}]"), || {
                    "ladder must be strictly decreasing".into()
                })?;
            }
        }
        let f = &r.finetune;
        check(f.batch_size > 0, "reduce.finetune.batch_size", || "must be >= 1".into())?;
        check(f.sampled_steps > 0, "reduce.finetune.sampled_steps", || "must be >= 1".into())?;
        check(f.lr > 0.0 && f.lr.is_finite(), "reduce.finetune.lr", || format!("must be > 0, got {}", f.lr))?;
        check(f.top_p > 0.0 && f.top_p <= 1.0, "reduce.finetune.top_p", || {
            format!("must be in (0, 1], got {}", f.top_p)
        })?;
        check(f.prompt_len < self.corpus.spec.seq_len, "reduce.finetune.prompt_len", || {
            format!("must be shorter than the sequence length {}", self.corpus.spec.seq_len)
        })?;
        check(r.eval_sequences > 0, "reduce.eval_sequences", || "must be >= 1".into())?;

        self.validate_generate()?;

        let a = &self.analyze;
        check(a.key_tokens >= 1, "analyze.key_tokens", || "must be >= 1".into())?;
        check(a.bins >= 2, "analyze.bins", || "must be >= 2".into())?;

        let d = &self.duality;
        check(d.vocab >= 2, "duality.vocab", || format!("must be >= 2, got {}", d.vocab))?;
        check(d.grid >= 2, "duality.grid", || "must be >= 2".into())?;
        check(d.draws >= 1, "duality.draws", || "must be >= 1".into())?;
        Ok(())
    }

    fn validate_generate(&self) -> Result<()> {
        let g = &self.generate;
        let n = self.corpus.spec.seq_len;
        check(g.samples >= 1, "generate.samples", || "must be >= 1".into())?;
        check(g.steps >= 1 && g.steps <= self.schedule.t_max, "generate.steps", || {
            format!("must be in 1..={}, got {}", self.schedule.t_max, g.steps)
        })?;
        check(g.top_p > 0.0 && g.top_p <= 1.0, "generate.top_p", || {
            format!("must be in (0, 1], got {}", g.top_p)
        })?;
        check(g.prompt.len() <= n, "generate.prompt", || format!("longer than the sequence length {n}"))?;
        if let Some(&bad) = g.prompt.iter().find(|&&t| t >= self.corpus.spec.vocab_size) {
            return Err(CliError::config("generate.prompt", format!("token {bad} outside the vocabulary")));
        }
        check(!g.lambdas.is_empty(), "generate.lambdas", || "needs at least one value".into())?;
        for (i, &l) in g.lambdas.iter().enumerate() {
            check(l >= 0.0 && l.is_finite(), &format!("generate.lambdas[{i}]"), || {
                format!("must be >= 0, got {l}")
            })?;
        }
        check((0.0..=1.0).contains(&g.window), "generate.window", || {
            format!("must be in [0, 1], got {}", g.window)
        })?;
        check(!g.policies.is_empty(), "generate.policies", || "needs at least one policy".into())?;
        for (i, p) in g.policies.iter().enumerate() {
            p.validate().map_err(|e| CliError::config(format!("generate.policies[{i}]"), e.to_string()))?;
            if p.needs_scores() && g.classifier.is_none() {
                return Err(CliError::config(
                    format!("generate.policies[{i}]"),
                    "an adaptive policy needs classifier gradients but `generate.classifier` is not set",
                ));
            }
        }
        if g.classifier.is_none() {
            if let Some(i) = g.lambdas.iter().position(|&l| l > 0.0) {
                return Err(CliError::config(
                    format!("generate.lambdas[{i}]"),
                    "guidance needs `generate.classifier`",
                ));
            }
        }
        if let Some(c) = &g.constraint {
            check(c.eos_position < n, "generate.constraint.eos_position", || {
                format!("must be < {n}, got {}", c.eos_position)
            })?;
        }
        if let Some(t) = g.threads {
            check(t >= 1, "generate.threads", || "must be >= 1".into())?;
        }
        self.label_index()?;
        Ok(())
    }
}

/// Best-effort field name from a TOML error message such as
/// "unknown field `foo`, expected ...".
fn first_key(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("").to_string()
}
