//! The JSON run configuration consumed by `train`, `ablate` and `timing`.

use std::path::{Path, PathBuf};

use c2f_core::data::SplitManifest;
use c2f_core::trainer::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::args::{ModeArg, TrainOverrides};
use crate::error::{io_error, CliError};

/// JSON schema of [`RunConfig`], published next to the crate.
pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Supervised,
    Semi,
}

impl From<RunMode> for Mode {
    fn from(m: RunMode) -> Mode {
        match m {
            RunMode::Supervised => Mode::Supervised,
            RunMode::Semi => Mode::Semi,
        }
    }
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> RunMode {
        match m {
            ModeArg::Supervised => RunMode::Supervised,
            ModeArg::Semi => RunMode::Semi,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    /// Root with A/, B/ and label/; supplies the labelled and validation
    /// tiles (and the unlabelled ones unless `unlabelled_root` is set).
    pub dataset_root: PathBuf,
    /// Defaults to `<dataset_root>/manifest.json`.
    pub manifest: Option<PathBuf>,
    /// Second dataset whose training tiles form the unlabelled stream.
    /// Its labels are never opened.
    pub unlabelled_root: Option<PathBuf>,
    /// Defaults to every tile under `unlabelled_root/A`.
    pub unlabelled_manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Applies the seed chain and flag overrides.
    pub fn apply(&mut self, seed: Option<u64>, o: &TrainOverrides) {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if let Some(m) = o.mode {
            self.mode = m.into();
        }
        let t = &mut self.train;
        if let Some(v) = o.epochs {
            t.total_epochs = v;
        }
        if let Some(v) = o.warmup {
            t.warmup_epochs = v;
        }
        if let Some(v) = o.alpha {
            t.alpha = v;
        }
        if let Some(v) = o.beta {
            t.beta = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.lr {
            t.learning_rate = v;
        }
        if let Some(v) = o.width {
            t.width_multiplier = v;
        }
        if o.steps_per_epoch.is_some() {
            t.steps_per_epoch = o.steps_per_epoch;
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.dataset_root.join("manifest.json"))
    }

    /// Every problem with the configuration and the paths it names.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.train.problems();
        if self.out.is_none() {
            p.push("no output directory: set `out` or pass --out".into());
        }
        if self.dataset_root.as_os_str().is_empty() {
            p.push("dataset_root is required".into());
        } else if !self.dataset_root.join("A").is_dir() {
            p.push(format!("dataset_root {} has no A/ directory", self.dataset_root.display()));
        }
        if !self.dataset_root.as_os_str().is_empty() && !self.manifest_path().is_file() {
            p.push(format!("manifest {} does not exist", self.manifest_path().display()));
        }
        match (&self.unlabelled_root, self.mode) {
            (Some(_), RunMode::Supervised) => {
                p.push("unlabelled_root is only used in semi mode".into());
            }
            (Some(r), RunMode::Semi) if !r.join("A").is_dir() => {
                p.push(format!("unlabelled_root {} has no A/ directory", r.display()));
            }
            _ => {}
        }
        if self.unlabelled_manifest.is_some() && self.unlabelled_root.is_none() {
            p.push("unlabelled_manifest needs unlabelled_root".into());
        }
        if let Some(m) = &self.unlabelled_manifest {
            if !m.is_file() {
                p.push(format!("unlabelled_manifest {} does not exist", m.display()));
            }
        }
        p
    }

    /// Problems that need the manifest contents: empty streams.
    pub fn manifest_problems(&self, manifest: &SplitManifest) -> Vec<String> {
        let mut p = Vec::new();
        if manifest.labelled.is_empty() {
            p.push("the manifest has no labelled tiles".into());
        }
        if manifest.val.is_empty() {
            p.push("the manifest has no validation tiles; model selection needs them".into());
        }
        if self.mode == RunMode::Semi && self.unlabelled_root.is_none() && manifest.unlabelled.is_empty() {
            p.push("semi mode needs unlabelled tiles (labelled ratio 1.0 leaves none)".into());
        }
        p
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p))
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            RunMode::Supervised => "supervised",
            RunMode::Semi => "semi",
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }
}
