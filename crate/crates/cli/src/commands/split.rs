use c2f_core::data::{list_ids, make_split, SplitManifest};

use crate::args::SplitArgs;
use crate::error::{create_dir, CliError};

/// Splits the training ids of `--root`. When the root carries a
/// `manifest.json` its train/val/test partition is kept and only the
/// training ids are re-divided; otherwise every tile under A/ is training.
pub fn run(a: &SplitArgs) -> Result<(), CliError> {
    let existing = a.root.join("manifest.json");
    let (ids, val, test) = if existing.is_file() {
        let m = SplitManifest::load(&existing)?;
        (m.train_ids(), m.val, m.test)
    } else {
        (list_ids(&a.root)?, Vec::new(), Vec::new())
    };
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.root
            .file_name()
            .map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned())
    });
    let mut manifest = make_split(&dataset, &ids, a.ratio, a.seed.seed.unwrap_or(0))?;
    manifest.val = val;
    manifest.test = test;
    manifest.validate()?;
    create_dir(&a.out)?;
    manifest.save(&a.out.join("manifest.json"))?;
    println!("{} labelled / {} unlabelled", manifest.labelled.len(), manifest.unlabelled.len());
    Ok(())
}
