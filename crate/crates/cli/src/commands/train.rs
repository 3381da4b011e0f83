use std::path::Path;

use c2f_core::trainer::{run_training, save_checkpoint, Best, EpochLog, Mode, RunOutcome};

use super::{out_dir, prepare};
use crate::args::TrainArgs;
use crate::config::RunConfig;
use crate::error::{create_dir, write_file, CliError};
use crate::report::{metric_fields, train_log_fields, CsvLog, METRIC_COLUMNS, TRAIN_LOG_COLUMNS};

pub fn run(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    cfg.apply(a.seed.seed, &a.overrides);
    let outcome = train(&cfg)?;
    if let Some(b) = outcome.best() {
        println!(
            "best: {} at epoch {} with val F1 {:.2} / IoU {:.2}",
            b.model.as_str(),
            b.epoch,
            100.0 * b.metrics.f1,
            100.0 * b.metrics.iou
        );
    }
    Ok(())
}

/// Trains under `cfg` and writes every artifact into its output directory.
pub fn train(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let data = prepare(cfg, false)?;
    let out = out_dir(cfg);
    create_dir(&out.join("checkpoints"))?;
    write_file(&out.join("config.echo.json"), cfg.to_json())?;

    let mut train_log = CsvLog::create(&out.join("train_log.csv"), &TRAIN_LOG_COLUMNS)?;
    let mut val_header = vec!["epoch", "model"];
    val_header.extend(METRIC_COLUMNS);
    let mut val_log = CsvLog::create(&out.join("val_log.csv"), &val_header)?;
    // Wall-clock times live apart from the losses so the logs above are
    // reproducible byte for byte.
    let mut times = CsvLog::create(&out.join("epoch_times.csv"), &["epoch", "seconds"])?;

    let mut write_error = None;
    let mut on_epoch = |log: &EpochLog| {
        let mut write = || -> Result<(), CliError> {
            train_log.row(&train_log_fields(log))?;
            for (who, m) in [("student", log.val_student), ("teacher", log.val_teacher)] {
                if let Some(m) = m {
                    let mut row = vec![log.epoch.to_string(), who.to_string()];
                    row.extend(metric_fields(&m));
                    val_log.row(&row)?;
                }
            }
            times.row(&[log.epoch.to_string(), format!("{:.3}", log.seconds)])
        };
        if write_error.is_none() {
            write_error = write().err();
        }
    };
    let mode: Mode = cfg.mode.into();
    let outcome = match run_training(&cfg.train, &data.train_data(), mode, None, &mut on_epoch) {
        Ok(o) => o,
        Err(e @ c2f_core::Error::Numeric(_)) => {
            write_file(&out.join("nan_batch.txt"), format!("{e}\n"))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(e) = write_error {
        return Err(e);
    }

    let ckpt = out.join("checkpoints");
    let save = |best: &Option<Best>, name: &str| -> Result<(), CliError> {
        if let Some(b) = best {
            save_checkpoint(&b.params, None, Some(&cfg.train), &ckpt.join(name))?;
        }
        Ok(())
    };
    save(&outcome.best_student, "best_student.ckpt")?;
    save(&outcome.best_teacher, "best_teacher.ckpt")?;
    save_checkpoint(&outcome.student, outcome.ema.as_ref(), Some(&cfg.train), &ckpt.join("final.ckpt"))?;
    write_best_json(&out.join("best.json"), &outcome)?;
    Ok(outcome)
}

/// Which checkpoint the selection rule prefers, and why.
fn write_best_json(path: &Path, o: &RunOutcome) -> Result<(), CliError> {
    let entry = |b: &Best| {
        serde_json::json!({
            "model": b.model.as_str(),
            "epoch": b.epoch,
            "metrics": b.metrics,
        })
    };
    let doc = serde_json::json!({
        "selected": o.best().map(entry),
        "student": o.best_student.as_ref().map(entry),
        "teacher": o.best_teacher.as_ref().map(entry),
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("json serialises");
    text.push('\n');
    write_file(path, text)
}
