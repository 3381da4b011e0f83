use c2f_core::data::{list_ids, load_samples, save_mask_png};
use c2f_core::trainer::predict_masks;

use super::load_model;
use crate::args::InferArgs;
use crate::error::{create_dir, CliError};

/// Predicts every tile under `--root/A` into `--out/pred/{id}.png`.
pub fn run(a: &InferArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let ids = list_ids(&a.root)?;
    if ids.is_empty() {
        return Err(CliError::Core(c2f_core::Error::Data(format!("no tiles under {}", a.root.join("A").display()))));
    }
    let samples = load_samples(&a.root, &ids, false)?;
    let dir = a.out.join("pred");
    create_dir(&dir)?;
    for chunk in samples.chunks(64) {
        let masks = predict_masks(&model.net, &model.params, chunk, a.model.batch_size, a.model.threshold)?;
        for (s, m) in chunk.iter().zip(&masks) {
            save_mask_png(m, &dir.join(format!("{}.png", s.id)))?;
        }
    }
    println!("wrote {} masks to {}", samples.len(), dir.display());
    Ok(())
}
