use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cascade_core::train::{LogRecord, TrainSink, TrainState};
use cascade_core::{Error, Result};

/// JSON-lines training log plus a checkpoint file rewritten in place.
pub struct FileSink {
    log: BufWriter<File>,
    log_path: PathBuf,
    checkpoint: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl FileSink {
    /// `append` keeps an existing log (resumed runs).
    pub fn new(log_path: PathBuf, checkpoint: PathBuf, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&log_path)
            .map_err(io(&log_path))?;
        Ok(Self {
            log: BufWriter::new(file),
            log_path,
            checkpoint,
        })
    }

    pub fn save(&self, state: &TrainState) -> Result<()> {
        // write then rename so an interrupted save never leaves a torn checkpoint
        let tmp = self.checkpoint.with_extension("ckpt.tmp");
        state.to_checkpoint().save(&tmp)?;
        std::fs::rename(&tmp, &self.checkpoint).map_err(io(&self.checkpoint))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(io(&self.log_path))
    }
}

impl TrainSink for FileSink {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        match rec {
            LogRecord::Step { step, subject, loss, .. } => log::debug!("step {step} {subject} loss {loss:.5}"),
            LogRecord::Epoch {
                epoch,
                step,
                train_loss,
                dev_dice,
            } => log::info!("epoch {epoch} (step {step}) train loss {train_loss:.5} dev dice {dev_dice:.4?}"),
        }
        let line = serde_json::to_string(rec).expect("log record serialises");
        writeln!(self.log, "{line}").map_err(io(&self.log_path))
    }

    fn checkpoint(&mut self, state: &TrainState) -> Result<()> {
        self.flush()?;
        self.save(state)
    }
}
