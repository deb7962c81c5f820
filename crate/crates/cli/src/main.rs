//! `sspg`: generate synthetic grounding data, train teacher-student models and
//! evaluate them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;
use config::RunConfig;

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set lr=0.003`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Teacher,
    Student,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Supervised Burn-In on the labeled part of a dataset.
    Burnin {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Labeled fraction, e.g. 0.1 for 10% labeled / 90% unlabeled.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Burn-In followed by teacher-student mutual learning.
    TrainSsl {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<f64>,
        /// Quality-based loss weights (and, by default, the KL term).
        #[arg(long)]
        qla: Option<OnOff>,
        /// Drop this fraction of highest-entropy pseudo-labels.
        #[arg(long)]
        eds: Option<f64>,
        /// Held-out dataset for teacher snapshots.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        eval_every: Option<u64>,
    },
    /// Average recall of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding teacher.ckpt / student.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        model: Option<ModelArg>,
        /// Report directory; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Annotation days per labeled ratio.
    Budget {
        /// Total number of masks.
        #[arg(long)]
        count: Option<u64>,
    },
}

#[derive(Parser, Debug)]
#[command(name = "sspg", version, about = "Semi-supervised phrase grounding on synthetic scenes")]
struct Full {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn path_str(p: &std::path::Path) -> String {
    p.display().to_string()
}

fn overrides(cmd: &Command) -> Vec<(&'static str, String)> {
    let mut v = Vec::new();
    let mut push = |k: &'static str, val: Option<String>| {
        if let Some(val) = val {
            v.push((k, val));
        }
    };
    match cmd {
        Command::GenData { out, count } => {
            push("out", Some(path_str(out)));
            push("count", count.map(|c| c.to_string()));
        }
        Command::Burnin { data, out, ratio } => {
            push("data", data.as_deref().map(path_str));
            push("out", out.as_deref().map(path_str));
            push("ratio", ratio.map(|r| format!("{r:?}")));
        }
        Command::TrainSsl {
            data,
            out,
            ratio,
            qla,
            eds,
            eval_data,
            eval_every,
        } => {
            push("data", data.as_deref().map(path_str));
            push("out", out.as_deref().map(path_str));
            push("ratio", ratio.map(|r| format!("{r:?}")));
            push(
                "qla",
                qla.map(|q| match q {
                    OnOff::On => "on".to_string(),
                    OnOff::Off => "off".to_string(),
                }),
            );
            push("eds", eds.map(|e| format!("{e:?}")));
            push("eval_data", eval_data.as_deref().map(path_str));
            push("eval_every", eval_every.map(|e| e.to_string()));
        }
        Command::Eval {
            data,
            checkpoint,
            model,
            out,
        } => {
            push("data", data.as_deref().map(path_str));
            push("checkpoint", checkpoint.as_deref().map(path_str));
            push(
                "model",
                model.map(|m| match m {
                    ModelArg::Teacher => "teacher".to_string(),
                    ModelArg::Student => "student".to_string(),
                }),
            );
            push("out", out.as_deref().map(path_str));
        }
        Command::Budget { count } => push("budget_masks", count.map(|c| c.to_string())),
    }
    v
}

fn resolve(common: &Common, cmd: &Command) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Core(sspg_core::Error::Io {
                path: path.clone(),
                source: e,
            })
        })?;
        cfg.apply_text(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(s) = common.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    pairs.extend(overrides(cmd).into_iter().map(|(k, v)| (k.to_string(), v)));
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        pairs.push((k.trim().to_string(), v.to_string()));
    }
    for (k, v) in pairs {
        cfg.set(&k, &v)
            .map_err(|m| CliError::Usage(format!("key `{k}`: {m}")))?;
    }
    if !(cfg.ratio > 0.0 && cfg.ratio <= 1.0) {
        return Err(CliError::Usage(format!("ratio {} outside (0, 1]", cfg.ratio)));
    }
    cfg.gen_spec().validate()?;
    cfg.train_config().validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SSPG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("SSPG_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(full: Full) -> Result<(), CliError> {
    init_threads()?;
    let cfg = resolve(&full.common, &full.command)?;
    match full.command {
        Command::GenData { .. } => commands::gen_data(&cfg),
        Command::Burnin { .. } => commands::burnin(&cfg),
        Command::TrainSsl { .. } => commands::train_ssl(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Budget { .. } => commands::budget(&cfg),
    }
}

fn main() -> ExitCode {
    let full = match Full::try_parse() {
        Ok(f) => f,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(full) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
