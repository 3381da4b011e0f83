use c2f_core::model::{C2FNet, ModuleToggles};
use c2f_core::trainer::{evaluate, run_training, Mode, TrainConfig};

use super::{out_dir, prepare, RunData};
use crate::args::{AblateArgs, Sweep};
use crate::config::RunConfig;
use crate::error::{create_dir, write_file, CliError};
use crate::report::{metric_fields, CsvLog, METRIC_COLUMNS};

pub const WARMUP_SWEEP: [usize; 4] = [5, 10, 15, 20];

/// Named variants of `base`, all sharing its seed.
pub fn variants(sweep: Sweep, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match sweep {
        Sweep::Modules => std::iter::once(("full".to_string(), ModuleToggles::all_enabled()))
            .chain(ModuleToggles::NAMES.iter().map(|n| {
                (format!("without_{n}"), ModuleToggles::without(n).expect("known module"))
            }))
            .map(|(name, toggles)| (name, TrainConfig { toggles, ..base.clone() }))
            .collect(),
        Sweep::Warmup => WARMUP_SWEEP
            .iter()
            .map(|&w| (w.to_string(), TrainConfig { warmup_epochs: w, ..base.clone() }))
            .collect(),
        Sweep::Beta => (1..=9)
            .map(|k| (format!("0.{k}"), TrainConfig { beta: k as f64 / 10.0, ..base.clone() }))
            .collect(),
    }
}

const HEADER: [&str; 9] = ["sweep", "variant", "mode", "seed", "status", "best_epoch", "best_model", "final_loss", "eval_split"];

pub fn run(a: &AblateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    cfg.apply(a.seed.seed, &a.overrides);
    let data = prepare(&cfg, true)?;
    let out = out_dir(&cfg);
    create_dir(&out)?;
    write_file(&out.join("config.echo.json"), cfg.to_json())?;
    let (failed, total) = sweep(&cfg, a.sweep, &data)?;
    println!("{} sweep: {} of {total} variants completed", a.sweep.as_str(), total - failed);
    Ok(())
}

/// Runs every variant, recording failures as rows; returns the number of
/// failed variants and the total.
pub fn sweep(cfg: &RunConfig, sweep: Sweep, data: &RunData) -> Result<(usize, usize), CliError> {
    let out = out_dir(cfg);
    let mut header: Vec<&str> = HEADER.to_vec();
    header.extend(METRIC_COLUMNS);
    header.push("error");
    let mut csv = CsvLog::create(&out.join(format!("ablation_{}.csv", sweep.as_str())), &header)?;
    let eval_set = if data.test.is_empty() { (&data.val, "val") } else { (&data.test, "test") };
    let mode: Mode = cfg.mode.into();
    let list = variants(sweep, &cfg.train);
    let mut failed = 0;
    for (name, train) in &list {
        log::info!("ablation {}: variant {name}", sweep.as_str());
        let result = run_training(train, &data.train_data(), mode, None, &mut |_| {}).and_then(|o| {
            let final_loss = o.logs.last().map_or(f64::NAN, |l| l.loss_total);
            if !o.logs.iter().all(|l| l.loss_total.is_finite()) {
                return Err(c2f_core::Error::Numeric(format!("variant {name} logged a non-finite loss")));
            }
            let best = o.best().ok_or_else(|| c2f_core::Error::Config("no validation tiles to select a model".into()))?;
            let net = C2FNet::new(train.model_config())?;
            let m = evaluate(&net, &best.params, eval_set.0, train.batch_size, train.binarize_threshold)?.metrics()?;
            Ok((best.epoch, best.model, final_loss, m))
        });
        let mut row = vec![sweep.as_str().to_string(), name.clone(), cfg.mode_name().into(), train.seed.to_string()];
        match result {
            Ok((epoch, model, loss, m)) => {
                row.extend(["ok".into(), epoch.to_string(), model.as_str().into(), loss.to_string(), eval_set.1.into()]);
                row.extend(metric_fields(&m));
                row.push(String::new());
            }
            Err(e) => {
                failed += 1;
                log::warn!("ablation variant {name} failed: {e}");
                row.extend(["error".into(), String::new(), String::new(), String::new(), String::new()]);
                row.extend(std::iter::repeat_n(String::new(), METRIC_COLUMNS.len()));
                row.push(e.to_string());
            }
        }
        csv.row(&row)?;
    }
    Ok((failed, list.len()))
}
