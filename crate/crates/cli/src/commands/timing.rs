use std::time::Instant;

use c2f_core::data::{collate, synth_tile, BiTemporalSample, SynthConfig};
use c2f_core::model::C2FNet;
use c2f_core::trainer::{run_training, Mode, TrainConfig, TrainData};

use super::median;
use crate::args::TimingArgs;
use crate::config::{RunConfig, RunMode};
use crate::error::{create_dir, CliError};
use crate::report::CsvLog;

pub struct Timing {
    /// Seconds per training epoch, one per repetition.
    pub train_epoch_s: Vec<f64>,
    /// Milliseconds per tile of model-only inference, one per repetition.
    pub infer_ms_per_tile: Vec<f64>,
}

/// Times `reps` single training epochs and `reps` inference passes over
/// `tiles` in-memory synthetic tiles. Inference is timed around the
/// network call only; batches are assembled beforehand.
pub fn measure(train: &TrainConfig, mode: RunMode, tile: usize, tiles: usize, reps: usize) -> Result<Timing, CliError> {
    let synth = SynthConfig {
        tile_size: tile,
        seed: train.seed,
        ..SynthConfig::default()
    };
    synth.validate()?;
    let samples: Vec<BiTemporalSample> = (0..tiles).map(|i| synth_tile(&synth, "train", i).to_sample()).collect();
    let unlabelled: Vec<BiTemporalSample> = samples.iter().map(BiTemporalSample::unlabelled).collect();
    let cfg = TrainConfig {
        total_epochs: 1,
        warmup_epochs: 0,
        ..train.clone()
    };
    let data = TrainData {
        labelled: &samples,
        unlabelled: if mode == RunMode::Semi { &unlabelled } else { &[] },
        val: &[],
    };
    let mut train_epoch_s = Vec::with_capacity(reps);
    for _ in 0..reps {
        let out = run_training(&cfg, &data, Mode::from(mode), None, &mut |_| {})?;
        train_epoch_s.push(out.logs[0].seconds);
    }

    let net = C2FNet::new(cfg.model_config())?;
    let params = net.init_params(cfg.seed)?;
    let batches = samples
        .chunks(cfg.batch_size)
        .map(|c| collate(&c.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut infer_ms_per_tile = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut elapsed = 0.0;
        for (t1, t2, _) in &batches {
            let start = Instant::now();
            let p = net.predict(&params, t1, t2)?;
            elapsed += start.elapsed().as_secs_f64();
            std::hint::black_box(p);
        }
        infer_ms_per_tile.push(1e3 * elapsed / tiles as f64);
    }
    Ok(Timing {
        train_epoch_s,
        infer_ms_per_tile,
    })
}

pub fn run(a: &TimingArgs) -> Result<(), CliError> {
    let (mut train, mode) = match &a.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            (cfg.train, cfg.mode)
        }
        None => (TrainConfig::default(), RunMode::Supervised),
    };
    if let Some(s) = a.seed.seed {
        train.seed = s;
    }
    if let Some(w) = a.width {
        if w != train.width_multiplier {
            train.width_multiplier = w;
            train.decoder_width = None;
        }
    }
    let mut problems = train.problems();
    if a.tiles == 0 {
        problems.push("--tiles must be at least 1".into());
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let t = measure(&train, mode, a.tile, a.tiles, a.reps as usize)?;

    create_dir(&a.out)?;
    let mut csv = CsvLog::create(
        &a.out.join("timing.csv"),
        &["measure", "unit", "width", "tile", "tiles", "reps", "median", "samples"],
    )?;
    for (measure, unit, values) in [
        ("train_epoch", "s", &t.train_epoch_s),
        ("inference_per_tile", "ms", &t.infer_ms_per_tile),
    ] {
        let m = median(values);
        csv.row(&[
            measure.to_string(),
            unit.to_string(),
            train.width_multiplier.to_string(),
            a.tile.to_string(),
            a.tiles.to_string(),
            a.reps.to_string(),
            format!("{m:.6}"),
            values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"),
        ])?;
        println!("{measure}: median {m:.3} {unit} over {} repetitions", values.len());
    }
    Ok(())
}
