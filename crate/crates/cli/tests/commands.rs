use std::fs;
use std::path::Path;
use std::process::Command;

use budlora::checkpoint;
use budlora::commands::{cmd_compress, cmd_distill, cmd_eval, cmd_pretrain, cmd_report};
use budlora::{CliError, Pool, RunConfig};
use budlora_core::{Error, Serial};

fn quick() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.n_sequences = 200;
    cfg.corpus.seq_len = 24;
    cfg.pretrain.total_steps = 12;
    cfg.distill.total_steps = 12;
    cfg.eval.instances_per_seed = 2;
    cfg.eval.seeds = vec![0];
    cfg.eval.tasks = vec!["choose_first_of_3".into()];
    cfg.eval.max_answer_tokens = 3;
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_budlora"))
}

#[test]
fn pretrain_is_bit_reproducible_and_round_trips() {
    let cfg = quick();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_pretrain(&cfg, a.path(), &Pool::new(Some(2))).unwrap();
    let rb = cmd_pretrain(&cfg, b.path(), &Serial).unwrap();
    assert_eq!(ra.dir.file_name(), rb.dir.file_name());
    let bytes = fs::read(&ra.checkpoint).unwrap();
    assert_eq!(bytes, fs::read(&rb.checkpoint).unwrap());
    assert_eq!(
        fs::read(ra.dir.join("loss_trace.csv")).unwrap(),
        fs::read(rb.dir.join("loss_trace.csv")).unwrap()
    );
    let (manifest, model) = checkpoint::load(&ra.checkpoint).unwrap();
    assert_eq!(manifest.kind, "teacher");
    assert_eq!(checkpoint::encode(&model, "teacher", manifest.config), bytes);
    assert!(ra.loss_final.is_finite() && ra.perplexity_final.is_finite());
}

#[test]
fn full_pipeline_contracts() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = quick();
    let t = cmd_pretrain(&cfg, out.path(), &Serial).unwrap();
    cfg.paths.teacher = Some(t.checkpoint.clone());

    cfg.method = "full".into();
    let full = cmd_distill(&cfg, out.path(), &Serial).unwrap();
    let (m, model) = checkpoint::load(&full.checkpoint).unwrap();
    assert!(!model.is_wrapped() && m.modules.iter().all(|e| e.variant == "dense"));
    assert!(full.tracking.is_none());
    cfg.paths.checkpoint = Some(full.checkpoint.clone());
    assert!(matches!(cmd_compress(&cfg, out.path(), &Serial), Err(CliError::Core(Error::State(_)))));

    cfg.method = "budgeted".into();
    let missing = cmd_distill(&cfg, out.path(), &Serial).unwrap_err();
    assert!(matches!(&missing, CliError::Config(m) if m.starts_with("budget.final_fraction")));
    cfg.budget.final_fraction = Some(0.4);
    let s = cmd_distill(&cfg, out.path(), &Serial).unwrap();
    assert_eq!((s.gated_modules, s.layers.as_slice()), (14, &[0usize, 3][..]));
    let trace = fs::read_to_string(s.dir.join("retention_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 13);
    assert!(trace.starts_with("step,layers.0.self_attn.q_proj,"));

    cfg.paths.checkpoint = Some(s.checkpoint.clone());
    let c = cmd_compress(&cfg, out.path(), &Serial).unwrap();
    assert_eq!(c.kept + c.svd + c.dropped, 14);
    for f in ["compression_report.json", "compression_report.txt", "modules.csv", "summary.json"] {
        assert!(c.dir.join(f).is_file(), "{f}");
    }
    cfg.paths.checkpoint = Some(c.checkpoint.clone());
    assert!(matches!(cmd_compress(&cfg, out.path(), &Serial), Err(CliError::Core(Error::State(_)))));
    let e = cmd_eval(&cfg, out.path(), &Serial).unwrap();
    assert_eq!(e.kind, "compressed");
    assert!(e.perplexity.is_finite() && e.composite.is_some());
    assert_eq!(e.module_macs, c.module_macs_after);
    let csv = fs::read_to_string(e.dir.join("probe_results.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap().split(',').next(), Some("choose_first_of_3"));

    cfg.paths.checkpoint = Some(out.path().join("absent.ckpt"));
    assert!(matches!(cmd_eval(&cfg, out.path(), &Serial), Err(CliError::Io { .. })));
}

#[test]
fn report_rows_for_each_fraction() {
    let out = tempfile::tempdir().unwrap();
    let r = cmd_report(&RunConfig::default(), out.path(), &Serial).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!((r.dense_macs, r.lora_macs), (51_314_688, 12_681_216));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["fractions"][2]["reference"]["kept"], 24);
    assert_eq!(json["fractions"][2]["kept"], 17);
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn binary_exit_codes_and_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"kd": {"tau": -1}}"#);
    let o = bin().args(["report", "--config"]).arg(&bad).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kd.tau"));

    let unknown = write(dir.path(), "unknown.json", r#"{"budget": {"f": 0.4}}"#);
    let o = bin().args(["report", "--config"]).arg(&unknown).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget.f"));

    // flag beats file
    let f = write(dir.path(), "f.json", r#"{"budget": {"final_fraction": 2.0}}"#);
    let o = bin().args(["report", "--budget-f", "0.4", "--config"]).arg(&f).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[F = 0.8]"));

    let o = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("absent.ckpt"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}
