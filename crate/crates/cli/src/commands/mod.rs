pub mod ablate;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod split;
pub mod synth;
pub mod timing;
pub mod train;
pub mod viz;

use std::path::{Path, PathBuf};

use c2f_core::data::{list_ids, load_samples, BiTemporalSample, SplitManifest};
use c2f_core::model::{C2FNet, ModelParams};
use c2f_core::trainer::{load_checkpoint, TrainData};

use crate::args::CheckpointArgs;
use crate::config::{RunConfig, RunMode};
use crate::error::CliError;

/// Tiles a training run needs, loaded once.
pub struct RunData {
    pub manifest: SplitManifest,
    pub labelled: Vec<BiTemporalSample>,
    pub unlabelled: Vec<BiTemporalSample>,
    pub val: Vec<BiTemporalSample>,
    pub test: Vec<BiTemporalSample>,
}

impl RunData {
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            labelled: &self.labelled,
            unlabelled: &self.unlabelled,
            val: &self.val,
        }
    }
}

/// Validates `cfg` against its manifest and loads the tiles. Nothing is
/// read from disk beyond the manifests until every check has passed.
pub fn prepare(cfg: &RunConfig, with_test: bool) -> Result<RunData, CliError> {
    cfg.validate()?;
    let manifest = SplitManifest::load(&cfg.manifest_path())?;
    let mut problems = cfg.manifest_problems(&manifest);
    let unlabelled_ids = match (cfg.mode, &cfg.unlabelled_root) {
        (RunMode::Supervised, _) => Vec::new(),
        (RunMode::Semi, None) => manifest.unlabelled.clone(),
        (RunMode::Semi, Some(root)) => match &cfg.unlabelled_manifest {
            Some(p) => SplitManifest::load(p)?.train_ids(),
            None => list_ids(root)?,
        },
    };
    if cfg.mode == RunMode::Semi && cfg.unlabelled_root.is_some() && unlabelled_ids.is_empty() {
        problems.push("unlabelled_root provides no tiles".into());
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let root = &cfg.dataset_root;
    let unlabelled_root = cfg.unlabelled_root.as_deref().unwrap_or(root);
    Ok(RunData {
        labelled: load_samples(root, &manifest.labelled, true)?,
        unlabelled: load_samples(unlabelled_root, &unlabelled_ids, false)?,
        val: load_samples(root, &manifest.val, true)?,
        test: if with_test { load_samples(root, &manifest.test, true)? } else { Vec::new() },
        manifest,
    })
}

/// The run's output directory after `--out` has been applied.
pub fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().expect("validated configs name an output directory")
}

pub struct LoadedModel {
    pub net: C2FNet,
    pub params: ModelParams,
    /// Checkpoint file stem, plus `/teacher` for the EMA weights.
    pub label: String,
}

pub fn load_model(a: &CheckpointArgs) -> Result<LoadedModel, CliError> {
    if a.batch_size == 0 {
        return Err(CliError::Config(vec!["--batch-size must be at least 1".into()]));
    }
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(CliError::Config(vec![format!("--threshold {} must lie in (0, 1)", a.threshold)]));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut train = ckpt.train_config.clone().unwrap_or_default();
    if let Some(w) = a.width {
        if w != train.width_multiplier {
            train.width_multiplier = w;
            train.decoder_width = None;
        }
    }
    let config = train.model_config();
    let params = if a.teacher { ckpt.teacher_for(&config)? } else { ckpt.params_for(&config)? };
    let stem = file_stem(&a.checkpoint);
    Ok(LoadedModel {
        net: C2FNet::new(config)?,
        params,
        label: if a.teacher { format!("{stem}/teacher") } else { stem },
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

/// Middle value; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
