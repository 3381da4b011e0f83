use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which tiles are labelled, unlabelled, validation and test. Each list is
/// sorted; the training order is re-derived from the training seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub seed: u64,
    pub ratio: f64,
    pub labelled: Vec<String>,
    pub unlabelled: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

/// `ceil(ratio * n)`, with a small tolerance so that products such as
/// `0.05 * 740` that land a hair above an integer in binary floating point
/// are not rounded up a whole sample.
pub fn labelled_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Seeded shuffle of `train_ids`; the first `labelled_count` become the
/// labelled pool.
pub fn make_split(dataset: &str, train_ids: &[String], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("labelled ratio {ratio} must lie in (0, 1]")));
    }
    if train_ids.is_empty() {
        return Err(Error::Config("cannot split an empty id list".into()));
    }
    let mut ids = train_ids.to_vec();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate id {}", w[0])));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = labelled_count(ids.len(), ratio);
    let mut unlabelled = ids.split_off(k);
    let mut labelled = ids;
    labelled.sort();
    unlabelled.sort();
    Ok(SplitManifest {
        dataset: dataset.to_string(),
        seed,
        ratio,
        labelled,
        unlabelled,
        val: Vec::new(),
        test: Vec::new(),
    })
}

impl SplitManifest {
    pub fn train_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.labelled.iter().chain(&self.unlabelled).cloned().collect();
        ids.sort();
        ids
    }

    /// Errors unless the four lists are pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for (list, ids) in [("labelled", &self.labelled), ("unlabelled", &self.unlabelled), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                if let Some(prev) = seen.insert(id.as_str(), list) {
                    return Err(Error::Data(format!("id {id} appears in both {prev} and {list}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SplitManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }
}
