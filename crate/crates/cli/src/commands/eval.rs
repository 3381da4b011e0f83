use c2f_core::data::{load_samples, SplitManifest};
use c2f_core::metrics::{compute_metrics, confusion, render_confusion_map, ConfusionCounts};
use c2f_core::trainer::{label_mask, predict_masks};

use super::load_model;
use crate::args::{EvalArgs, SplitName};
use crate::error::{create_dir, io_error, CliError};
use crate::report::{metric_fields, per_image_fields, CsvLog, METRIC_COLUMNS};

pub fn run(a: &EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| a.root.join("manifest.json"));
    let manifest = SplitManifest::load(&manifest_path)?;
    let ids = match a.split {
        SplitName::Labelled => manifest.labelled.clone(),
        SplitName::Unlabelled => manifest.unlabelled.clone(),
        SplitName::Train => manifest.train_ids(),
        SplitName::Val => manifest.val.clone(),
        SplitName::Test => manifest.test.clone(),
    };
    if ids.is_empty() {
        return Err(CliError::Config(vec![format!("split {} of {} is empty", a.split.as_str(), manifest_path.display())]));
    }
    let samples = load_samples(&a.root, &ids, true)?;
    let preds = predict_masks(&model.net, &model.params, &samples, a.model.batch_size, a.model.threshold)?;

    create_dir(&a.out)?;
    let viz_dir = a.out.join("viz");
    if a.viz {
        create_dir(&viz_dir)?;
    }
    let mut per_image = {
        let mut header = vec!["id", "tp", "tn", "fp", "fn"];
        header.extend(METRIC_COLUMNS);
        CsvLog::create(&a.out.join("metrics_per_image.csv"), &header)?
    };
    let mut pooled = ConfusionCounts::default();
    for (sample, pred) in samples.iter().zip(&preds) {
        let gt = label_mask(sample)?;
        let counts = confusion(pred, &gt)?;
        pooled += counts;
        per_image.row(&per_image_fields(&sample.id, &counts)?)?;
        if a.viz {
            let path = viz_dir.join(format!("{}.png", sample.id));
            render_confusion_map(pred, &gt)?
                .save(&path)
                .map_err(|e| io_error(&path, std::io::Error::other(e)))?;
        }
    }
    let m = compute_metrics(&pooled)?;
    let mut header = vec!["split", "ratio", "model"];
    header.extend(METRIC_COLUMNS);
    let mut metrics = CsvLog::create(&a.out.join("metrics.csv"), &header)?;
    let mut row = vec![a.split.as_str().to_string(), manifest.ratio.to_string(), model.label.clone()];
    row.extend(metric_fields(&m));
    metrics.row(&row)?;
    println!(
        "{} {} ({} tiles): F1 {:.2} Pre {:.2} Rec {:.2} OA {:.2} KC {:.2} IoU {:.2}",
        model.label,
        a.split.as_str(),
        samples.len(),
        100.0 * m.f1,
        100.0 * m.precision,
        100.0 * m.recall,
        100.0 * m.oa,
        100.0 * m.kc,
        100.0 * m.iou
    );
    Ok(())
}
