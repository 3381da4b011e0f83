use crate::data::{collate, BiTemporalSample};
use crate::error::{Error, Result};
use crate::metrics::{binarize, compute_metrics, confusion, BinaryMask, ConfusionCounts, MetricSet};
use crate::model::{C2FNet, ModelParams};

/// Pooled and per-sample confusion counts over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub pooled: ConfusionCounts,
    pub per_sample: Vec<(String, ConfusionCounts)>,
}

impl Evaluation {
    pub fn metrics(&self) -> Result<MetricSet> {
        compute_metrics(&self.pooled)
    }
}

/// Binarised full-resolution predictions, one per sample, in order.
pub fn predict_masks(
    net: &C2FNet,
    params: &ModelParams,
    samples: &[BiTemporalSample],
    batch_size: usize,
    threshold: f64,
) -> Result<Vec<BinaryMask>> {
    let mut masks = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&BiTemporalSample> = chunk.iter().collect();
        let (t1, t2, _) = collate(&refs)?;
        let logits = net.predict(params, &t1, &t2)?.logits;
        let (n, _, h, w) = logits.dims4();
        for i in 0..n {
            masks.push(binarize(&logits.data()[i * h * w..(i + 1) * h * w], h, w, threshold)?);
        }
    }
    Ok(masks)
}

pub fn label_mask(sample: &BiTemporalSample) -> Result<BinaryMask> {
    let label = sample
        .label
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sample {} has no label", sample.id)))?;
    let data = label.data().iter().map(|&v| u8::from(v > 0.5)).collect();
    BinaryMask::new(sample.height(), sample.width(), data)
}

pub fn evaluate(
    net: &C2FNet,
    params: &ModelParams,
    samples: &[BiTemporalSample],
    batch_size: usize,
    threshold: f64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let masks = predict_masks(net, params, samples, batch_size, threshold)?;
    let per_sample = samples
        .iter()
        .zip(&masks)
        .map(|(s, pred)| Ok((s.id.clone(), confusion(pred, &label_mask(s)?)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        pooled: per_sample.iter().map(|(_, c)| *c).sum(),
        per_sample,
    })
}
