use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sspg_core::eval::{budget_days, evaluate_model, CSV_HEADER};
use sspg_core::model::{load_checkpoint, save_checkpoint};
use sspg_core::store::{load_dataset, save_dataset};
use sspg_core::synth::{generate_dataset, split_dataset};
use sspg_core::train::{burn_in, train_ssl_with, BurnInMetrics, StepMetrics};
use sspg_core::{Error, Sample};

use crate::config::{Role, RunConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const BURNIN_LOG: &str = "burnin_metrics.jsonl";
pub const SSL_LOG: &str = "metrics.jsonl";
pub const SNAPSHOTS: &str = "snapshots.csv";

/// Budgeted ratios printed by `budget`.
pub const BUDGET_RATIOS: [f64; 6] = [0.01, 0.05, 0.1, 0.3, 0.5, 1.0];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Config(_)) => 1,
            CliError::Core(Error::Io { .. } | Error::Format { .. }) => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing `{key}` (pass --{key} or set it in the config)")))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn jsonl<T>(rows: &[T], line: impl Fn(&T) -> String) -> String {
    rows.iter().fold(String::new(), |mut s, r| {
        s.push_str(&line(r));
        s.push('\n');
        s
    })
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let samples = generate_dataset(&cfg.gen_spec())?;
    save_dataset(&samples, out)?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load(cfg: &RunConfig) -> Result<Vec<Sample>> {
    Ok(load_dataset(required(&cfg.data, "data")?)?)
}

pub fn burnin(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let samples = load(cfg)?;
    let tc = cfg.train_config();
    let split = split_dataset(&samples, cfg.ratio, tc.seed)?;
    let (state, log) = burn_in(&split, &tc)?;
    create_dir(out)?;
    save_checkpoint(&state.teacher, out.join(TEACHER_CKPT))?;
    save_checkpoint(&state.student, out.join(STUDENT_CKPT))?;
    write(&out.join(BURNIN_LOG), jsonl(&log, BurnInMetrics::to_json_line))?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    println!(
        "burn-in: {} labeled samples, {} steps, final supervised loss {:.4}",
        split.labeled.len(),
        log.len(),
        log.last().map_or(0.0, |m| m.l_sup_bce + m.l_sup_dice)
    );
    Ok(())
}

fn snapshot_row(step: u64, cols: [Option<f64>; 5]) -> String {
    let cells: Vec<String> = cols
        .iter()
        .map(|c| c.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}")))
        .collect();
    format!("{step},{}\n", cells.join(","))
}

pub fn train_ssl(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let samples = load(cfg)?;
    let eval_set = match (&cfg.eval_data, cfg.eval_every) {
        (Some(p), n) if n > 0 => Some(load_dataset(p)?),
        _ => None,
    };
    let tc = cfg.train_config();
    let split = split_dataset(&samples, cfg.ratio, tc.seed)?;

    let mut snapshots = format!("step,{CSV_HEADER}\n");
    let mut snapshot_err = None;
    let outcome = train_ssl_with(&split, &tc, |state, _| {
        let Some(set) = &eval_set else { return };
        if state.ssl_step % cfg.eval_every != 0 || snapshot_err.is_some() {
            return;
        }
        match evaluate_model(&state.teacher, set) {
            Ok(r) => snapshots.push_str(&snapshot_row(state.ssl_step, r.columns())),
            Err(e) => snapshot_err = Some(e),
        }
    })?;
    if let Some(e) = snapshot_err {
        return Err(e.into());
    }

    create_dir(out)?;
    save_checkpoint(&outcome.state.teacher, out.join(TEACHER_CKPT))?;
    save_checkpoint(&outcome.state.student, out.join(STUDENT_CKPT))?;
    write(&out.join(BURNIN_LOG), jsonl(&outcome.burn_in_log, BurnInMetrics::to_json_line))?;
    write(&out.join(SSL_LOG), jsonl(&outcome.log, StepMetrics::to_json_line))?;
    if eval_set.is_some() {
        write(&out.join(SNAPSHOTS), snapshots)?;
    }
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    let last = outcome.log.last().cloned().unwrap_or_default();
    println!(
        "train-ssl: {} labeled / {} unlabeled, {} burn-in + {} mutual steps, tau {}, mean mask weight {:.6}",
        split.labeled.len(),
        split.unlabeled.len(),
        outcome.burn_in_log.len(),
        outcome.log.len(),
        last.tau,
        last.mean_w_mask
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let ckpt_dir = required(&cfg.checkpoint, "checkpoint")?;
    let file = match cfg.model {
        Role::Teacher => TEACHER_CKPT,
        Role::Student => STUDENT_CKPT,
    };
    let params = load_checkpoint(ckpt_dir.join(file))?;
    let samples = load(cfg)?;
    let report = evaluate_model(&params, &samples)?;
    let out = cfg.out.as_deref().unwrap_or(ckpt_dir);
    create_dir(out)?;
    let role = cfg.model.as_str();
    write(&out.join(format!("eval_{role}.csv")), report.to_csv())?;
    let text = format!("model: {role}\nphrases: {}\n{}", report.n_phrases(), report.to_text());
    write(&out.join(format!("eval_{role}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

pub fn budget_table(n_masks: u64) -> Result<String> {
    let mut out = String::from("ratio,days\n");
    for r in BUDGET_RATIOS {
        let _ = writeln!(out, "{r:?},{:.1}", budget_days(n_masks, r)?);
    }
    Ok(out)
}

pub fn budget(cfg: &RunConfig) -> Result<()> {
    print!("{}", budget_table(cfg.budget_masks)?);
    Ok(())
}
