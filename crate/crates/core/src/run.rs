//! A complete training run: epochs, per-epoch checkpoints, the loss log and
//! the final validation accuracy.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;

use crate::classnet::ClassNet;
use crate::config::RunConfig;
use crate::diffcore::Checkpoint;
use crate::evalkit::{multilabel_accuracy, EvalError};
use crate::synthdata::{Dataset, LabeledImage};
use crate::train::{StepRecord, TrainError, Trainer};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mxcm";
pub const SUMMARY_FILE: &str = "train_summary.txt";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub net: ClassNet,
    /// Records for the steps executed by this call (after any resume point).
    pub records: Vec<StepRecord>,
    pub val_accuracy: f64,
}

/// Writes `bytes` next to `path` and renames over it, so a crash mid-write
/// leaves the previous file intact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Keeps the header and the rows for steps below `keep`; later rows belong
/// to an epoch that never reached its checkpoint.
fn truncate_log(path: &Path, keep: u64) -> Result<(), RunError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = format!("{}\n", StepRecord::CSV_HEADER);
    for line in text.lines().skip(1) {
        let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
        if step.is_some_and(|s| s < keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Trains per `cfg` on `train`, then scores exact-match accuracy on `val`.
///
/// With `out` set, the resolved config, loss log, a checkpoint after every
/// epoch and a summary are written there. `resume` continues from a
/// checkpoint produced by an earlier call with the same config.
pub fn train_run(
    cfg: &RunConfig,
    train: &[LabeledImage],
    val: &Dataset,
    out: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<RunOutcome, RunError> {
    let mut trainer = match resume {
        Some(ck) => Trainer::from_checkpoint(ck, cfg.net_config(), cfg.train_config())?,
        None => Trainer::new(
            ClassNet::new(cfg.net_config(), cfg.seed).map_err(TrainError::from)?,
            cfg.train_config(),
        )?,
    };
    let log_path = out.map(|d| d.join(LOG_FILE));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, cfg.to_text()).map_err(io_err(&cfg_path))?;
        truncate_log(log_path.as_deref().expect("set with out"), trainer.global_step())?;
    }

    let mut records = Vec::new();
    while trainer.epoch() < cfg.epochs {
        let epoch_records = trainer.train_epoch(train)?;
        if let (Some(dir), Some(log)) = (out, &log_path) {
            let mut f = fs::OpenOptions::new().append(true).open(log).map_err(io_err(log))?;
            let mut text = String::new();
            for r in &epoch_records {
                text.push_str(&r.csv_row());
                text.push('\n');
            }
            f.write_all(text.as_bytes()).map_err(io_err(log))?;
            write_atomic(&dir.join(CHECKPOINT_FILE), &trainer.checkpoint().to_bytes())?;
        }
        if let Some(last) = epoch_records.last() {
            info!(
                "epoch {}/{}: step {} loss {:.5} (cls {:.5})",
                trainer.epoch(),
                cfg.epochs,
                last.step,
                last.loss.total,
                last.loss.cls
            );
        }
        records.extend(epoch_records);
    }

    let net = trainer.into_net();
    let val_accuracy = multilabel_accuracy(&net, val)?;
    info!("validation exact-match accuracy {val_accuracy:.4}");
    if let Some(dir) = out {
        let path = dir.join(SUMMARY_FILE);
        let text = format!("epochs = {}\nval_accuracy = {val_accuracy}\n", cfg.epochs);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(RunOutcome {
        net,
        records,
        val_accuracy,
    })
}
