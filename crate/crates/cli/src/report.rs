//! CSV writers. Scores in metrics files are percentages with two decimals;
//! losses are written at full precision.

use std::fs::File;
use std::path::Path;

use c2f_core::metrics::{compute_metrics, ConfusionCounts, MetricSet};
use c2f_core::trainer::EpochLog;

use crate::error::{io_error, CliError};

pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io_error(path, io),
        other => CliError::Failed(format!("{}: {other:?}", path.display())),
    }
}

/// A CSV file whose rows are flushed as they are written, so a run that
/// dies part-way leaves every finished row on disk.
pub struct CsvLog {
    path: std::path::PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        let mut log = CsvLog {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        };
        log.row(header)?;
        Ok(log)
    }

    pub fn row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<(), CliError> {
        self.writer.write_record(fields).map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(|e| io_error(&self.path, e))
    }
}

pub const METRIC_COLUMNS: [&str; 6] = ["F1", "Pre", "Rec", "OA", "KC", "IoU"];

pub fn metric_fields(m: &MetricSet) -> Vec<String> {
    [m.f1, m.precision, m.recall, m.oa, m.kc, m.iou].map(pct).to_vec()
}

pub const TRAIN_LOG_COLUMNS: [&str; 9] =
    ["epoch", "phase", "loss_sup", "loss_con", "loss_total", "train_F1", "val_F1", "val_IoU", "val_model"];

/// One `train_log.csv` row. Validation columns hold the better of student
/// and teacher for that epoch.
pub fn train_log_fields(log: &EpochLog) -> Vec<String> {
    let (f1, iou, who) = match log.val_best() {
        Some(m) => {
            let who = if Some(m) == log.val_student { "student" } else { "teacher" };
            (pct(m.f1), pct(m.iou), who)
        }
        None => (String::new(), String::new(), ""),
    };
    vec![
        log.epoch.to_string(),
        log.phase.as_str().to_string(),
        log.loss_sup.to_string(),
        log.loss_con.to_string(),
        log.loss_total.to_string(),
        pct(log.train.f1),
        f1,
        iou,
        who.to_string(),
    ]
}

pub fn per_image_fields(id: &str, c: &ConfusionCounts) -> Result<Vec<String>, CliError> {
    let m = compute_metrics(c)?;
    let mut row = vec![id.to_string(), c.tp.to_string(), c.tn.to_string(), c.fp.to_string(), c.fn_.to_string()];
    row.extend(metric_fields(&m));
    Ok(row)
}
