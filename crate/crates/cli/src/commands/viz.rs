use c2f_core::data::load_binary_mask;
use c2f_core::metrics::{confusion, render_confusion_map};

use crate::args::VizArgs;
use crate::error::{create_dir, io_error, CliError};
use crate::report::CsvLog;

/// Renders `--out/viz/{name}` for every PNG in `--pred` and tabulates the
/// confusion counts in `--out/confusion.csv`.
pub fn run(a: &VizArgs) -> Result<(), CliError> {
    let entries = std::fs::read_dir(&a.pred).map_err(|e| io_error(&a.pred, e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|err| io_error(&a.pred, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(CliError::Core(c2f_core::Error::Data(format!("no PNG masks in {}", a.pred.display()))));
    }
    let dir = a.out.join("viz");
    create_dir(&dir)?;
    let mut table = CsvLog::create(&a.out.join("confusion.csv"), &["id", "tp", "tn", "fp", "fn"])?;
    for name in &names {
        let pred = load_binary_mask(&a.pred.join(name))?;
        let gt = load_binary_mask(&a.gt.join(name))?;
        let c = confusion(&pred, &gt)?;
        let path = dir.join(name);
        render_confusion_map(&pred, &gt)?
            .save(&path)
            .map_err(|e| io_error(&path, std::io::Error::other(e)))?;
        let id = name.trim_end_matches(".png");
        table.row(&[id.to_string(), c.tp.to_string(), c.tn.to_string(), c.fp.to_string(), c.fn_.to_string()])?;
    }
    println!("rendered {} confusion maps to {}", names.len(), dir.display());
    Ok(())
}
