//! Run configuration: one JSON document with a section per pipeline stage.
//! Missing keys take defaults, unknown keys are rejected, and every field
//! is checked against its owning type's invariants with its path in the
//! error. Command-line flags override file values.

use std::path::{Path, PathBuf};

use budlora_core::accounting::TrainMethod;
use budlora_core::budget::BudgetSchedule;
use budlora_core::compress::CompressionConfig;
use budlora_core::distill::{CorpusConfig, KdConfig, TrainPlan};
use budlora_core::evalharness::{PromptSpec, ProbeTask};
use budlora_core::gatedlora::{logit, LoraConfig};
use budlora_core::model::{SelectionMode, TransformerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// `full`, `lora` or `budgeted`.
    pub method: String,
    pub model: ModelSection,
    pub student: StudentSection,
    pub corpus: CorpusSection,
    pub pretrain: PlanSection,
    pub distill: PlanSection,
    pub kd: KdSection,
    pub lora: LoraSection,
    pub budget: BudgetSection,
    pub compress: CompressSection,
    pub eval: EvalSection,
    pub report: ReportSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: "budgeted".into(),
            model: ModelSection::default(),
            student: StudentSection::default(),
            corpus: CorpusSection::default(),
            pretrain: PlanSection {
                total_steps: 2000,
                base_lr: 3e-3,
                ..PlanSection::default()
            },
            distill: PlanSection::default(),
            kd: KdSection::default(),
            lora: LoraSection::default(),
            budget: BudgetSection::default(),
            compress: CompressSection::default(),
            eval: EvalSection::default(),
            report: ReportSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Teacher geometry; the student shares everything but the layer count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from(TransformerConfig::desk())
    }
}

impl From<TransformerConfig> for ModelSection {
    fn from(c: TransformerConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            d_ff: c.d_ff,
            n_heads: c.n_heads,
            n_kv_heads: c.n_kv_heads,
            head_dim: c.head_dim,
            vocab_size: c.vocab_size,
            max_seq_len: c.max_seq_len,
        }
    }
}

impl From<ModelSection> for TransformerConfig {
    fn from(m: ModelSection) -> Self {
        Self {
            n_layers: m.n_layers,
            d_model: m.d_model,
            d_ff: m.d_ff,
            n_heads: m.n_heads,
            n_kv_heads: m.n_kv_heads,
            head_dim: m.head_dim,
            vocab_size: m.vocab_size,
            max_seq_len: m.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub n_layers: usize,
    /// `truncated`, `middle`, `last` or `mixed`.
    pub selection: String,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            n_layers: 2,
            selection: "mixed".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub copy_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            n_sequences: c.n_sequences,
            seq_len: c.seq_len,
            copy_fraction: c.copy_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub total_steps: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub warmup_cap_steps: usize,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            base_lr: 1e-3,
            warmup_fraction: 0.03,
            warmup_cap_steps: 2000,
            grad_clip_norm: 1.0,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdSection {
    pub tau: f64,
    pub lambda_kd: f64,
}

impl Default for KdSection {
    fn default() -> Self {
        let k = KdConfig::default();
        Self {
            tau: k.tau,
            lambda_kd: k.lambda_kd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub r_max: usize,
    pub alpha: f64,
    /// Initial gate value `σ(θ₀)`.
    pub gate_init: f64,
    pub dense_skip_threshold: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self {
            r_max: 16,
            alpha: 32.0,
            gate_init: 0.9,
            dense_skip_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSection {
    pub t0: f64,
    pub t1: f64,
    /// Final dense fraction `F`; required for the budgeted method.
    pub final_fraction: Option<f64>,
    pub ema_beta: f64,
    pub eps_zero: f64,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            t0: 0.1,
            t1: 0.3,
            final_fraction: None,
            ema_beta: 0.9,
            eps_zero: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressSection {
    pub gate_threshold: f64,
    pub eps_zero: f64,
    pub eps_lr: f64,
    pub r_max_dense: usize,
}

impl Default for CompressSection {
    fn default() -> Self {
        let c = CompressionConfig::default();
        Self {
            gate_threshold: c.gate_threshold,
            eps_zero: c.eps_zero,
            eps_lr: c.eps_lr,
            r_max_dense: c.r_max_dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_shots: usize,
    pub seeds: Vec<u64>,
    pub instances_per_seed: usize,
    pub max_answer_tokens: usize,
    /// Probe task names; empty means the default nine.
    pub tasks: Vec<String>,
    /// Overrides every gated module's retention after loading.
    pub set_retention: Option<f64>,
    /// Skips the probe suite (perplexity only).
    pub skip_probes: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = PromptSpec::default();
        Self {
            n_shots: p.n_shots,
            seeds: p.seeds,
            instances_per_seed: p.instances_per_seed,
            max_answer_tokens: p.max_answer_tokens,
            tasks: Vec::new(),
            set_retention: None,
            skip_probes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// `reference` (six-layer 768/3072 student) or `desk` (the model section
    /// with the student layer count).
    pub geometry: String,
    pub lora_rank: usize,
    pub fractions: Vec<f64>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            geometry: "reference".into(),
            lora_rank: 128,
            fractions: vec![0.0, 0.4, 0.8],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Teacher checkpoint read by `distill`.
    pub teacher: Option<PathBuf>,
    /// Input checkpoint for `compress` and `eval`.
    pub checkpoint: Option<PathBuf>,
}

/// Command-line overrides, applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub budget_f: Option<f64>,
    pub teacher: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn bad(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

fn check(ok: bool, path: &str, msg: &str) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(bad(path, msg))
    }
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Defaults, then the file (if any), then the overrides; validated.
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = &o.method {
            self.method = m.clone();
        }
        if let Some(f) = o.budget_f {
            self.budget.final_fraction = Some(f);
        }
        if let Some(p) = &o.teacher {
            self.paths.teacher = Some(p.clone());
        }
        if let Some(p) = &o.checkpoint {
            self.paths.checkpoint = Some(p.clone());
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train_method()?;

        let m = &self.model;
        check(m.n_layers >= 1, "model.n_layers", "must be at least 1")?;
        check(m.d_model >= 1, "model.d_model", "must be at least 1")?;
        check(m.d_ff >= 1, "model.d_ff", "must be at least 1")?;
        check(m.n_heads >= 1, "model.n_heads", "must be at least 1")?;
        check(
            m.n_kv_heads >= 1 && m.n_heads % m.n_kv_heads == 0,
            "model.n_kv_heads",
            "must be at least 1 and divide n_heads",
        )?;
        check(
            m.head_dim >= 2 && m.head_dim % 2 == 0 && m.n_heads * m.head_dim == m.d_model,
            "model.head_dim",
            "must be even with n_heads * head_dim = d_model",
        )?;
        check(m.vocab_size >= 7, "model.vocab_size", "must be at least 7")?;
        check(
            m.max_seq_len >= self.corpus.seq_len,
            "model.max_seq_len",
            "must be at least corpus.seq_len",
        )?;
        TransformerConfig::from(*m).validate().map_err(|e| bad("model", e))?;

        let s = &self.student;
        check(
            (1..=m.n_layers).contains(&s.n_layers),
            "student.n_layers",
            "must lie in 1..=model.n_layers",
        )?;
        self.selection_mode()?;

        let c = &self.corpus;
        check(c.n_sequences >= 50, "corpus.n_sequences", "must be at least 50")?;
        check(c.seq_len >= 2, "corpus.seq_len", "must be at least 2")?;
        check(unit(c.copy_fraction), "corpus.copy_fraction", "must lie in [0, 1]")?;

        for (name, p) in [("pretrain", &self.pretrain), ("distill", &self.distill)] {
            check(p.total_steps >= 1, &format!("{name}.total_steps"), "must be at least 1")?;
            check(positive(p.base_lr), &format!("{name}.base_lr"), "must be positive")?;
            check(unit(p.warmup_fraction), &format!("{name}.warmup_fraction"), "must lie in [0, 1]")?;
            check(positive(p.grad_clip_norm), &format!("{name}.grad_clip_norm"), "must be positive")?;
            check(p.batch_size >= 1, &format!("{name}.batch_size"), "must be at least 1")?;
        }

        check(positive(self.kd.tau), "kd.tau", "must be positive")?;
        check(unit(self.kd.lambda_kd), "kd.lambda_kd", "must lie in [0, 1]")?;

        let l = &self.lora;
        check(l.r_max >= 1, "lora.r_max", "must be at least 1")?;
        check(positive(l.alpha), "lora.alpha", "must be positive")?;
        check(l.gate_init > 0.0 && l.gate_init < 1.0, "lora.gate_init", "must lie in (0, 1)")?;
        check(
            l.dense_skip_threshold >= 0.0 && l.dense_skip_threshold < 1.0,
            "lora.dense_skip_threshold",
            "must lie in [0, 1)",
        )?;

        let b = &self.budget;
        check((0.0..1.0).contains(&b.t0), "budget.t0", "must lie in [0, 1)")?;
        check(b.t1 > b.t0 && b.t1 <= 1.0, "budget.t1", "must lie in (t0, 1]")?;
        if let Some(f) = b.final_fraction {
            check(unit(f), "budget.final_fraction", "must lie in [0, 1]")?;
        }
        check((0.0..1.0).contains(&b.ema_beta), "budget.ema_beta", "must lie in [0, 1)")?;
        check(b.eps_zero > 0.0 && b.eps_zero < 1.0, "budget.eps_zero", "must lie in (0, 1)")?;

        let k = &self.compress;
        check(k.gate_threshold > 0.0 && k.gate_threshold < 1.0, "compress.gate_threshold", "must lie in (0, 1)")?;
        check(k.eps_zero > 0.0, "compress.eps_zero", "must be positive")?;
        check(k.eps_lr > k.eps_zero && k.eps_lr <= 1.0, "compress.eps_lr", "must lie in (eps_zero, 1]")?;
        check(k.r_max_dense >= 1, "compress.r_max_dense", "must be at least 1")?;

        let e = &self.eval;
        check(!e.seeds.is_empty(), "eval.seeds", "must not be empty")?;
        check(e.instances_per_seed >= 1, "eval.instances_per_seed", "must be at least 1")?;
        check(e.max_answer_tokens >= 1, "eval.max_answer_tokens", "must be at least 1")?;
        for (i, t) in e.tasks.iter().enumerate() {
            ProbeTask::parse(t, 0).map_err(|err| bad(&format!("eval.tasks[{i}]"), err))?;
        }
        if let Some(d) = e.set_retention {
            check(unit(d), "eval.set_retention", "must lie in [0, 1]")?;
        }

        let r = &self.report;
        check(
            r.geometry == "reference" || r.geometry == "desk",
            "report.geometry",
            "must be reference or desk",
        )?;
        check(r.lora_rank >= 1, "report.lora_rank", "must be at least 1")?;
        for (i, &f) in r.fractions.iter().enumerate() {
            check(unit(f), &format!("report.fractions[{i}]"), "must lie in [0, 1]")?;
        }
        Ok(())
    }

    pub fn train_method(&self) -> CliResult<TrainMethod> {
        self.method.parse().map_err(|e| bad("method", e))
    }

    pub fn selection_mode(&self) -> CliResult<SelectionMode> {
        self.student.selection.parse().map_err(|e| bad("student.selection", e))
    }

    pub fn teacher_config(&self) -> TransformerConfig {
        self.model.into()
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n_sequences: self.corpus.n_sequences,
            seq_len: self.corpus.seq_len,
            vocab_size: self.model.vocab_size,
            copy_fraction: self.corpus.copy_fraction,
            seed: self.seed,
        }
    }

    pub fn plan(&self, section: &PlanSection, stream: u64) -> TrainPlan {
        TrainPlan {
            total_steps: section.total_steps,
            base_lr: section.base_lr,
            warmup_fraction: section.warmup_fraction,
            warmup_cap_steps: section.warmup_cap_steps,
            grad_clip_norm: section.grad_clip_norm,
            batch_size: section.batch_size,
            seq_len: self.corpus.seq_len,
            seed: budlora_core::numerics::hash64(self.seed, stream),
        }
    }

    pub fn kd_config(&self) -> KdConfig {
        KdConfig {
            tau: self.kd.tau,
            lambda_kd: self.kd.lambda_kd,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            r_max: self.lora.r_max,
            alpha: self.lora.alpha,
            gate_logit_init: logit(self.lora.gate_init),
            dense_skip_threshold: self.lora.dense_skip_threshold,
        }
    }

    /// Schedule for the budgeted method; `budget.final_fraction` must be set.
    pub fn required_schedule(&self) -> CliResult<BudgetSchedule> {
        self.schedule()?
            .ok_or_else(|| bad("budget.final_fraction", "required for method budgeted"))
    }

    /// Schedule for the configured `F`, or `None` when unset.
    pub fn schedule(&self) -> CliResult<Option<BudgetSchedule>> {
        self.budget
            .final_fraction
            .map(|f| BudgetSchedule::new(self.budget.t0, self.budget.t1, f).map_err(|e| bad("budget", e)))
            .transpose()
    }

    pub fn compression_config(&self) -> CompressionConfig {
        CompressionConfig {
            gate_threshold: self.compress.gate_threshold,
            eps_zero: self.compress.eps_zero,
            eps_lr: self.compress.eps_lr,
            r_max_dense: self.compress.r_max_dense,
        }
    }

    pub fn prompt_spec(&self) -> PromptSpec {
        PromptSpec {
            n_shots: self.eval.n_shots,
            seeds: self.eval.seeds.clone(),
            max_answer_tokens: self.eval.max_answer_tokens,
            instances_per_seed: self.eval.instances_per_seed,
            max_len: self.model.max_seq_len,
        }
    }

    pub fn probe_tasks(&self) -> CliResult<Vec<ProbeTask>> {
        if self.eval.tasks.is_empty() {
            return Ok(ProbeTask::default_suite(self.seed));
        }
        self.eval
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| ProbeTask::parse(t, self.seed).map_err(|e| bad(&format!("eval.tasks[{i}]"), e)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_of(json: &str) -> String {
        let cfg = RunConfig::from_json(json);
        match cfg.and_then(|c| c.validate()) {
            Err(CliError::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert!(RunConfig::default().required_schedule().is_err());
        let cfg = RunConfig::from_json(r#"{"budget": {"final_fraction": 0.4}}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.required_schedule().unwrap().final_fraction(), 0.4);
        assert_eq!(cfg.budget.t1, 0.3);
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let m = err_of(r#"{"kd": {"tau": 3.0, "temperature": 1}}"#);
        assert!(m.starts_with("kd.temperature"), "{m}");
        let m = err_of(r#"{"bogus": 1}"#);
        assert!(m.contains("bogus"), "{m}");
        let m = err_of(r#"{"lora": {"r_max": "x"}}"#);
        assert!(m.starts_with("lora.r_max"), "{m}");
    }

    #[test]
    fn invariants_report_field_paths() {
        let base = r#""method": "lora""#;
        for (frag, path) in [
            (r#""kd": {"tau": 0}"#, "kd.tau"),
            (r#""kd": {"lambda_kd": 1.5}"#, "kd.lambda_kd"),
            (r#""budget": {"t0": 0.5, "t1": 0.4}"#, "budget.t1"),
            (r#""budget": {"final_fraction": 2}"#, "budget.final_fraction"),
            (r#""compress": {"eps_lr": 0.0001}"#, "compress.eps_lr"),
            (r#""student": {"n_layers": 9}"#, "student.n_layers"),
            (r#""student": {"selection": "odd"}"#, "student.selection"),
            (r#""distill": {"base_lr": -1}"#, "distill.base_lr"),
            (r#""model": {"n_kv_heads": 3}"#, "model.n_kv_heads"),
            (r#""eval": {"tasks": ["nope"]}"#, "eval.tasks[0]"),
            (r#""report": {"geometry": "huge"}"#, "report.geometry"),
            (r#""lora": {"gate_init": 1.0}"#, "lora.gate_init"),
        ] {
            let m = err_of(&format!("{{{base}, {frag}}}"));
            assert!(m.starts_with(path), "{frag}: {m}");
        }
        assert!(err_of(r#"{"method": "half"}"#).starts_with("method"));
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = RunConfig::from_json(r#"{"seed": 4, "method": "lora"}"#).unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            method: Some("budgeted".into()),
            budget_f: Some(0.0),
            ..Default::default()
        });
        assert_eq!((cfg.seed, cfg.method.as_str(), cfg.budget.final_fraction), (9, "budgeted", Some(0.0)));
        cfg.validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.budget.final_fraction = Some(0.4);
        cfg.kd.tau = 0.1 + 0.2;
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
