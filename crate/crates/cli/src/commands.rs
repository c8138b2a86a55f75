//! The five pipeline commands. Each one writes into its own run directory
//! `<out>/<command>-<hash>`, where the hash covers the command name and the
//! full resolved configuration, and returns a typed summary that is also
//! written as `summary.json` (or the command's report file).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use budlora_core::accounting::{compression_report, dense_macs, lora_macs, static_report, train_proxy, CostReport, TrainMethod};
use budlora_core::budget::{BudgetSchedule, ControllerState};
use budlora_core::compress::compress_model;
use budlora_core::distill::{distill, ema, pretrain, Controller, SyntheticCorpus, TrainOutcome};
use budlora_core::evalharness::{perplexity, run_probe_suite, ProbeReport, Tokenizer};
use budlora_core::model::{select_layers, Linear, TrainMode, TransformerConfig};
use budlora_core::numerics::hash64;
use budlora_core::{Error, Executor, Rng};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Model};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

// Independent random streams derived from the run seed.
const STREAM_TEACHER_INIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_LORA_INIT: u64 = 3;
const STREAM_DISTILL: u64 = 4;

/// Smoothing used for the reported final loss.
pub const LOSS_EMA_BETA: f64 = 0.98;

/// Dense-kept / dropped labels printed in the reference table at F = 0.8,
/// with its average rank, speedup over LoRA and parameter reduction.
pub const REFERENCE_F08: ReferenceRow = ReferenceRow {
    kept: 24,
    svd: 1,
    dropped: 17,
    avg_rank: 122.5,
    speedup_vs_dense: 1.15,
    speedup_vs_lora: 1.44,
    param_reduction: 0.306,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub kept: usize,
    pub svd: usize,
    pub dropped: usize,
    pub avg_rank: f64,
    pub speedup_vs_dense: f64,
    pub speedup_vs_lora: f64,
    pub param_reduction: f64,
}

pub fn config_hash(command: &str, cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\n");
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.finalize().iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Creates `<out>/<command>-<hash>` and records the resolved config in it.
pub fn run_dir(out: &Path, command: &str, cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = out.join(format!("{command}-{}", config_hash(command, cfg)));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    write_text(path, &text)
}

fn config_snapshot(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn loss_trace_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("step,loss_kd,loss_ce,loss_total,lr,grad_norm,retained_cost_fraction\n");
    for r in &outcome.trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step, r.loss_kd, r.loss_ce, r.loss_total, r.lr, r.grad_norm, r.retained_cost_fraction
        );
    }
    s
}

fn retention_trace_csv(outcome: &TrainOutcome, names: &[String]) -> String {
    let mut s = String::from("step");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (r, row) in outcome.trace.iter().zip(&outcome.retentions) {
        let _ = write!(s, "{}", r.step);
        for d in row {
            let _ = write!(s, ",{d}");
        }
        s.push('\n');
    }
    s
}

fn required(path: &Option<PathBuf>, field: &str) -> CliResult<PathBuf> {
    path.clone().ok_or_else(|| CliError::Config(format!("{field}: required by this command")))
}

/// Per-token MACs of the seven projections of every layer as the model is
/// currently deployed (a gated module pays for its dense term only while
/// it is active).
pub fn module_macs(model: &Model) -> u64 {
    model
        .linears()
        .map(|(_, _, l)| match l {
            Linear::Dense(w) => w.len() as u64,
            Linear::Gated(g) => {
                let lora = (g.r_max() * (g.d_in() + g.d_out())) as u64;
                lora + if g.dense_active() { g.dense_cost() } else { 0 }
            }
            Linear::Compressed(c) => c.macs(),
        })
        .sum()
}

fn loss_stats(outcome: &TrainOutcome) -> (f64, f64, f64) {
    let losses = outcome.losses();
    let smoothed = ema(&losses, LOSS_EMA_BETA);
    (
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        smoothed.last().copied().unwrap_or(f64::NAN),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub loss_final_smoothed: f64,
    pub perplexity_initial: f64,
    pub perplexity_final: f64,
    pub param_count: usize,
}

pub fn cmd_pretrain<E: Executor>(cfg: &RunConfig, out: &Path, exec: &E) -> CliResult<PretrainSummary> {
    let dir = run_dir(out, "pretrain", cfg)?;
    let corpus = SyntheticCorpus::generate(&cfg.corpus_config())?;
    let mut rng = Rng::new(hash64(cfg.seed, STREAM_TEACHER_INIT));
    let mut model = Model::new(cfg.teacher_config(), &mut rng)?;
    let held_out = corpus.held_out();
    let perplexity_initial = perplexity(&model, &held_out, exec)?;
    let plan = cfg.plan(&cfg.pretrain, STREAM_PRETRAIN);
    let outcome = pretrain(&mut model, &corpus, &plan, exec)?;
    let perplexity_final = perplexity(&model, &held_out, exec)?;

    let ckpt = dir.join("teacher.ckpt");
    checkpoint::save(&ckpt, &model, "teacher", config_snapshot(cfg))?;
    write_text(&dir.join("loss_trace.csv"), &loss_trace_csv(&outcome))?;
    let (loss_initial, loss_final, loss_final_smoothed) = loss_stats(&outcome);
    let summary = PretrainSummary {
        dir: dir.clone(),
        checkpoint: ckpt,
        steps: outcome.trace.len(),
        loss_initial,
        loss_final,
        loss_final_smoothed,
        perplexity_initial,
        perplexity_final,
        param_count: model.param_count(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// How closely the applied retained-cost fraction followed `b(t)`. With
/// EMA factor `β` the retained fraction at step `s` must lie in
/// `[b(t_s) − eps_zero, b(t_{s−K}) + β^K]` where `K` is the lag.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleTracking {
    pub lag_steps: usize,
    /// Largest `b(t_s) − retained_s` (how far below the budget it went).
    pub max_below: f64,
    /// Largest `retained_s − b(t_{s−K})`.
    pub max_above_lagged: f64,
    pub lag_tolerance: f64,
    pub final_retained: f64,
    pub final_budget: f64,
    pub within_lag: bool,
}

pub fn schedule_tracking(outcome: &TrainOutcome, schedule: &BudgetSchedule, beta: f64, eps_zero: f64) -> CliResult<ScheduleTracking> {
    let total = outcome.trace.len();
    let lag_tolerance: f64 = 1e-3;
    let lag_steps = if beta == 0.0 {
        0
    } else {
        (lag_tolerance.ln() / beta.ln()).ceil() as usize
    };
    let b_at = |step: usize| schedule.fraction((step + 1) as f64 / total as f64);
    let (mut below, mut above) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for r in &outcome.trace {
        let got = r.retained_cost_fraction;
        below = below.max(b_at(r.step)? - got);
        let lagged = if r.step >= lag_steps { b_at(r.step - lag_steps)? } else { 1.0 };
        above = above.max(got - lagged);
    }
    let final_retained = outcome.trace.last().map_or(f64::NAN, |r| r.retained_cost_fraction);
    let final_budget = schedule.final_fraction();
    let tol = beta.powi(lag_steps as i32) + 1e-12;
    let within_lag = below <= eps_zero + 1e-12
        && above <= tol
        && final_retained >= final_budget - eps_zero - 1e-12
        && final_retained <= final_budget + tol;
    Ok(ScheduleTracking {
        lag_steps,
        max_below: below,
        max_above_lagged: above,
        lag_tolerance: tol,
        final_retained,
        final_budget,
        within_lag,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillSummary {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub method: String,
    pub final_fraction: Option<f64>,
    pub layers: Vec<usize>,
    pub steps: usize,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub loss_final_smoothed: f64,
    pub perplexity: f64,
    pub module_macs: u64,
    pub gated_modules: usize,
    pub final_retentions: Vec<f64>,
    pub tracking: Option<ScheduleTracking>,
}

pub fn cmd_distill<E: Executor>(cfg: &RunConfig, out: &Path, exec: &E) -> CliResult<DistillSummary> {
    let method = cfg.train_method()?;
    let schedule = match method {
        TrainMethod::Budgeted => Some(cfg.required_schedule()?),
        _ => None,
    };
    let teacher_path = required(&cfg.paths.teacher, "paths.teacher")?;
    let dir = run_dir(out, "distill", cfg)?;
    let (_, teacher) = checkpoint::load(&teacher_path)?;
    if teacher.is_wrapped() || teacher.is_compressed() {
        return Err(Error::State("teacher checkpoint must hold a dense model".into()).into());
    }
    let corpus = SyntheticCorpus::generate(&cfg.corpus_config())?;
    let selection = select_layers(teacher.config().n_layers, cfg.student.n_layers, cfg.selection_mode()?)?;
    let mut student = teacher.build_student(&selection)?;

    let mode = if method == TrainMethod::Full {
        TrainMode::Full
    } else {
        let mut rng = Rng::new(hash64(cfg.seed, STREAM_LORA_INIT));
        student.wrap_with_gated_lora(&cfg.lora_config(), &mut rng)?;
        TrainMode::Lora
    };
    let mut controller = match schedule {
        Some(schedule) => {
            let state = ControllerState::for_modules(&student.gated_modules(), cfg.budget.ema_beta, cfg.budget.eps_zero)?;
            Some(Controller { schedule, state })
        }
        None => None,
    };

    let plan = cfg.plan(&cfg.distill, STREAM_DISTILL);
    let outcome = distill(&teacher, &mut student, &corpus, &plan, &cfg.kd_config(), mode, controller.as_mut(), exec)?;
    let ppl = perplexity(&student, &corpus.held_out(), exec)?;

    let ckpt = dir.join("student.ckpt");
    checkpoint::save(&ckpt, &student, "student", config_snapshot(cfg))?;
    write_text(&dir.join("loss_trace.csv"), &loss_trace_csv(&outcome))?;
    let names: Vec<String> = student.gated_modules().iter().map(|g| g.name().to_string()).collect();
    write_text(&dir.join("retention_trace.csv"), &retention_trace_csv(&outcome, &names))?;

    let tracking = match &controller {
        Some(c) => Some(schedule_tracking(&outcome, &c.schedule, cfg.budget.ema_beta, cfg.budget.eps_zero)?),
        None => None,
    };
    let (loss_initial, loss_final, loss_final_smoothed) = loss_stats(&outcome);
    let summary = DistillSummary {
        dir: dir.clone(),
        checkpoint: ckpt,
        method: method.to_string(),
        final_fraction: (method == TrainMethod::Budgeted).then(|| cfg.budget.final_fraction).flatten(),
        layers: selection.indices.clone(),
        steps: outcome.trace.len(),
        loss_initial,
        loss_final,
        loss_final_smoothed,
        perplexity: ppl,
        module_macs: module_macs(&student),
        gated_modules: names.len(),
        final_retentions: student.gated_modules().iter().map(|g| g.retention()).collect(),
        tracking,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn report_json(r: &CostReport) -> serde_json::Value {
    json!({
        "modules": r.n_modules,
        "kept": r.kept,
        "svd": r.svd,
        "dropped": r.dropped,
        "mean_active_rank": r.mean_active_rank,
        "lora_rank": r.lora_rank,
        "dense_macs": r.dense_macs,
        "lora_macs": r.lora_macs,
        "compressed_macs": r.compressed_macs,
        "params_before": r.params_before,
        "params_after": r.params_after,
        "speedup_vs_dense": r.speedup_vs_dense,
        "speedup_vs_lora": r.speedup_vs_lora,
        "param_reduction": r.param_reduction,
        "train_proxies": r.train_proxies.iter().map(|p| json!({
            "method": p.method.as_str(),
            "avg_dense_fraction": p.avg_dense_fraction,
            "cost": p.cost,
            "ratio_vs_full": p.ratio_vs_full,
        })).collect::<Vec<_>>(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressSummary {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub kept: usize,
    pub svd: usize,
    pub dropped: usize,
    /// LoRA ranks removed by gate hardening, summed over modules.
    pub gates_pruned: usize,
    pub module_macs_before: u64,
    pub module_macs_after: u64,
    pub speedup_vs_dense: f64,
    pub speedup_vs_lora: f64,
    pub param_reduction: f64,
}

pub fn cmd_compress<E: Executor>(cfg: &RunConfig, out: &Path, _exec: &E) -> CliResult<CompressSummary> {
    let input = required(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let dir = run_dir(out, "compress", cfg)?;
    let (_, model) = checkpoint::load(&input)?;
    if model.is_compressed() {
        return Err(Error::State("checkpoint is already compressed".into()).into());
    }
    let lora_rank = match model.gated_modules().first() {
        Some(g) => g.r_max(),
        None => return Err(Error::State("checkpoint has no gated modules to compress".into()).into()),
    };
    let (compressed, summary) = compress_model(&model, &cfg.compression_config())?;
    let mut report = compression_report(&summary, lora_rank)?;
    if let Some(s) = cfg.schedule()? {
        report = report.with_train_proxies(&s);
    }

    let ckpt = dir.join("compressed.ckpt");
    checkpoint::save(&ckpt, &compressed, "compressed", config_snapshot(cfg))?;
    write_json(&dir.join("compression_report.json"), &report_json(&report))?;
    write_text(&dir.join("compression_report.txt"), &report.to_text())?;
    let mut csv = String::from("name,d_in,d_out,case,retention,active_rank,svd_rank,macs,params\n");
    for m in &summary.modules {
        let svd = m.svd_rank.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            m.name,
            m.d_in,
            m.d_out,
            m.case.number(),
            m.retention,
            m.active_rank,
            svd,
            m.macs,
            m.params
        );
    }
    write_text(&dir.join("modules.csv"), &csv)?;
    let out = CompressSummary {
        dir: dir.clone(),
        checkpoint: ckpt,
        kept: report.kept,
        svd: report.svd,
        dropped: report.dropped,
        gates_pruned: summary.modules.iter().map(|m| lora_rank - m.active_rank).sum(),
        module_macs_before: module_macs(&model),
        module_macs_after: module_macs(&compressed),
        speedup_vs_dense: report.speedup_vs_dense,
        speedup_vs_lora: report.speedup_vs_lora,
        param_reduction: report.param_reduction,
    };
    write_json(&dir.join("summary.json"), &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub dir: PathBuf,
    pub kind: String,
    pub perplexity: f64,
    pub held_out_sequences: usize,
    pub module_macs: u64,
    pub composite: Option<f64>,
    pub composite_std: Option<f64>,
    #[serde(skip)]
    pub probes: Option<ProbeReport>,
}

pub fn cmd_eval<E: Executor>(cfg: &RunConfig, out: &Path, exec: &E) -> CliResult<EvalSummary> {
    let input = required(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let dir = run_dir(out, "eval", cfg)?;
    let (manifest, mut model) = checkpoint::load(&input)?;
    if let Some(d) = cfg.eval.set_retention {
        if !model.is_wrapped() {
            return Err(Error::State("eval.set_retention needs a gated checkpoint".into()).into());
        }
        model.set_all_retentions(d)?;
    }
    let mut corpus_cfg = cfg.corpus_config();
    corpus_cfg.vocab_size = model.config().vocab_size;
    let corpus = SyntheticCorpus::generate(&corpus_cfg)?;
    let held_out = corpus.held_out();
    let ppl = perplexity(&model, &held_out, exec)?;

    let probes = if cfg.eval.skip_probes {
        None
    } else {
        let tok = Tokenizer::standard();
        if tok.vocab_size() != model.config().vocab_size {
            return Err(Error::Compatibility(format!(
                "probe vocabulary has {} symbols, model has {}",
                tok.vocab_size(),
                model.config().vocab_size
            ))
            .into());
        }
        let mut spec = cfg.prompt_spec();
        spec.max_len = model.config().max_seq_len;
        Some(run_probe_suite(&model, &cfg.probe_tasks()?, &spec, &tok, exec)?)
    };

    let mut csv = String::from("task,seed,accuracy\n");
    if let Some(p) = &probes {
        for t in &p.tasks {
            for (s, a) in p.seeds.iter().zip(&t.per_seed) {
                let _ = writeln!(csv, "{},{s},{a}", t.task);
            }
        }
    }
    write_text(&dir.join("probe_results.csv"), &csv)?;
    let summary = EvalSummary {
        dir: dir.clone(),
        kind: manifest.kind,
        perplexity: ppl,
        held_out_sequences: held_out.len(),
        module_macs: module_macs(&model),
        composite: probes.as_ref().map(|p| p.composite),
        composite_std: probes.as_ref().map(|p| p.composite_std),
        probes,
    };
    let mut json = serde_json::to_value(&summary).expect("summary serializes");
    if let Some(p) = &summary.probes {
        json["tasks"] = p
            .tasks
            .iter()
            .map(|t| json!({"task": t.task, "per_seed": t.per_seed, "mean": t.mean}))
            .collect();
    }
    write_json(&dir.join("eval_summary.json"), &json)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionRow {
    pub final_fraction: f64,
    pub report: CostReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub dir: PathBuf,
    pub geometry: TransformerConfig,
    pub dense_macs: u64,
    pub lora_macs: u64,
    pub rows: Vec<FractionRow>,
    pub text: String,
}

pub fn cmd_report<E: Executor>(cfg: &RunConfig, out: &Path, _exec: &E) -> CliResult<ReportSummary> {
    let dir = run_dir(out, "report", cfg)?;
    let geometry = if cfg.report.geometry == "reference" {
        TransformerConfig::reference_student()
    } else {
        let mut g = cfg.teacher_config();
        g.n_layers = cfg.student.n_layers;
        g
    };
    let shapes = geometry.adapted_modules();
    let r = cfg.report.lora_rank;
    let (d, l) = (dense_macs(&shapes), lora_macs(&shapes, r));
    let mut text = String::new();
    let _ = writeln!(
        text,
        "geometry: {} layers, d_model {}, d_ff {}, {} adapted modules",
        geometry.n_layers,
        geometry.d_model,
        geometry.d_ff,
        shapes.len()
    );
    let _ = writeln!(text, "dense_macs: {d}");
    let _ = writeln!(text, "lora_macs(r={r}): {l}");
    let mut rows = Vec::new();
    let mut json_rows = Vec::new();
    for &f in &cfg.report.fractions {
        let report = static_report(&shapes, f, r, &cfg.compression_config())?;
        let _ = writeln!(text, "\n[F = {f}]");
        for p in &report.train_proxies {
            let _ = writeln!(text, "train_ratio.{}: {:.4}", p.method, p.ratio_vs_full);
        }
        let _ = writeln!(
            text,
            "kept/svd/dropped: {}/{}/{}",
            report.kept, report.svd, report.dropped
        );
        let _ = writeln!(text, "speedup_vs_dense: {:.4}", report.speedup_vs_dense);
        let _ = writeln!(text, "speedup_vs_lora: {:.4}", report.speedup_vs_lora);
        let _ = writeln!(text, "param_reduction: {:.4}", report.param_reduction);
        let mut row = report_json(&report);
        row["final_fraction"] = json!(f);
        if cfg.report.geometry == "reference" && f == 0.8 {
            let note = reference_note(&report);
            let _ = writeln!(text, "{note}");
            row["reference"] = json!(REFERENCE_F08);
            row["reference_note"] = json!(note);
        }
        json_rows.push(row);
        rows.push(FractionRow {
            final_fraction: f,
            report,
        });
    }
    let proxies = [TrainMethod::Full, TrainMethod::Lora]
        .map(|m| train_proxy(m, d, l, 1.0))
        .map(|p| json!({"method": p.method.as_str(), "ratio_vs_full": p.ratio_vs_full}));
    write_text(&dir.join("report.txt"), &text)?;
    write_json(
        &dir.join("report.json"),
        &json!({"dense_macs": d, "lora_macs": l, "lora_rank": r, "static_proxies": proxies, "fractions": json_rows}),
    )?;
    Ok(ReportSummary {
        dir,
        geometry,
        dense_macs: d,
        lora_macs: l,
        rows,
        text,
    })
}

/// Compares the F = 0.8 row with the reference labels. The reference
/// speedup is only reachable with the MLP modules kept dense and the
/// attention modules dropped, so the split is reported as computed and the
/// labels are flagged when they disagree.
pub fn reference_note(r: &CostReport) -> String {
    let refr = REFERENCE_F08;
    let labels_match = (r.kept, r.svd, r.dropped) == (refr.kept, refr.svd, refr.dropped);
    let mut s = format!(
        "reference row: kept/svd/dropped {}/{}/{}, avg rank {}, {:.2}x vs dense, {:.2}x vs LoRA, {:.1}% fewer params\n",
        refr.kept,
        refr.svd,
        refr.dropped,
        refr.avg_rank,
        refr.speedup_vs_dense,
        refr.speedup_vs_lora,
        100.0 * refr.param_reduction
    );
    let _ = write!(
        s,
        "computed:      kept/svd/dropped {}/{}/{}, avg rank {}, {:.2}x vs dense, {:.2}x vs LoRA, {:.1}% fewer params",
        r.kept,
        r.svd,
        r.dropped,
        r.mean_active_rank,
        r.speedup_vs_dense,
        r.speedup_vs_lora,
        100.0 * r.param_reduction
    );
    if !labels_match {
        let _ = write!(
            s,
            "\ndiscrepancy: the reference kept/dropped labels ({}/{}) disagree with the split behind its own {:.2}x speedup ({}/{}); the computed split is reported",
            refr.kept, refr.dropped, refr.speedup_vs_dense, r.kept, r.dropped
        );
    }
    s
}
