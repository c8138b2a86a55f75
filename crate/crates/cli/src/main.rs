use std::path::PathBuf;
use std::process::ExitCode;

use budlora::commands::{cmd_compress, cmd_distill, cmd_eval, cmd_pretrain, cmd_report};
use budlora::{CliResult, Overrides, Pool, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "budlora", version, about = "Budgeted gated-LoRA distillation and compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the synthetic corpus.
    Pretrain(Common),
    /// Distill a layer-selected student from a teacher checkpoint.
    Distill(Common),
    /// Compress a gated student checkpoint.
    Compress(Common),
    /// Held-out perplexity and probe accuracy of a checkpoint.
    Eval(Common),
    /// Static cost accounting for a range of final dense fractions.
    Report(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Full,
    Lora,
    Budgeted,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Final dense fraction F.
    #[arg(long = "budget-f")]
    budget_f: Option<f64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Teacher checkpoint (distill).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Input checkpoint (compress, eval).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            method: self.method.map(|m| {
                match m {
                    Method::Full => "full",
                    Method::Lora => "lora",
                    Method::Budgeted => "budgeted",
                }
                .to_string()
            }),
            budget_f: self.budget_f,
            teacher: self.teacher.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }
}

fn print<S: serde::Serialize>(s: &S) {
    println!("{}", serde_json::to_string_pretty(s).expect("summary serializes"));
}

fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Pretrain(c) | Command::Distill(c) | Command::Compress(c) | Command::Eval(c) | Command::Report(c) => c,
    };
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides())?;
    let pool = Pool::from_env();
    let out = &common.out;
    match cli.command {
        Command::Pretrain(_) => print(&cmd_pretrain(&cfg, out, &pool)?),
        Command::Distill(_) => print(&cmd_distill(&cfg, out, &pool)?),
        Command::Compress(_) => print(&cmd_compress(&cfg, out, &pool)?),
        Command::Eval(_) => print(&cmd_eval(&cfg, out, &pool)?),
        Command::Report(_) => {
            let r = cmd_report(&cfg, out, &pool)?;
            print!("{}", r.text);
            println!("written to {}", r.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
