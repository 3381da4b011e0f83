//! Dataset root layout: `A/{id}.png` (time 1), `B/{id}.png` (time 2) and
//! `label/{id}.png` (single-channel mask with values 0 and 255).

use std::path::Path;

use image::GrayImage;

use super::{BiTemporalSample, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::par;
use crate::tensor::Tensor;

/// RGB PNG as a `[3, h, w]` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px[ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| match p[0] {
            0 => Ok(0.0),
            255 => Ok(1.0),
            v => Err(Error::Data(format!("{}: mask value {v} is neither 0 nor 255", path.display()))),
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok(Tensor::from_vec(&[1, h, w], data))
}

/// A 0/255 mask PNG as a binary mask.
pub fn load_binary_mask(path: &Path) -> Result<BinaryMask> {
    let t = load_mask(path)?;
    let (h, w) = (t.shape()[1], t.shape()[2]);
    BinaryMask::new(h, w, t.data().iter().map(|&v| v as u8).collect())
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.data.iter().map(|&v| v * 255).collect(),
    )
    .expect("mask dimensions match data");
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_sample(root: &Path, id: &str, with_label: bool) -> Result<BiTemporalSample> {
    let named = |e: Error| Error::Data(format!("sample {id}: {e}"));
    let file = format!("{id}.png");
    let image_t1 = load_rgb(&root.join("A").join(&file)).map_err(named)?;
    let image_t2 = load_rgb(&root.join("B").join(&file)).map_err(named)?;
    if image_t1.shape() != image_t2.shape() {
        return Err(Error::Data(format!(
            "sample {id}: A is {:?}, B is {:?}",
            image_t1.shape(),
            image_t2.shape()
        )));
    }
    let label = if with_label {
        let m = load_mask(&root.join("label").join(&file)).map_err(named)?;
        if m.shape()[1..] != image_t1.shape()[1..] {
            return Err(Error::Data(format!("sample {id}: mask size differs from images")));
        }
        Some(m)
    } else {
        None
    };
    Ok(BiTemporalSample {
        id: id.to_string(),
        image_t1,
        image_t2,
        label,
    })
}

/// Reads the listed samples in order. Without `with_labels` the `label/`
/// directory is never touched.
pub fn load_samples(root: &Path, ids: &[String], with_labels: bool) -> Result<Vec<BiTemporalSample>> {
    par::map_slice(ids, |id| load_sample(root, id, with_labels))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct LoadedDataset {
    pub labelled: Vec<BiTemporalSample>,
    pub unlabelled: Vec<BiTemporalSample>,
    pub val: Vec<BiTemporalSample>,
    pub test: Vec<BiTemporalSample>,
}

/// Loads every list of a manifest; unlabelled samples carry no mask.
pub fn load_dataset(root: &Path, manifest: &SplitManifest) -> Result<LoadedDataset> {
    manifest.validate()?;
    Ok(LoadedDataset {
        labelled: load_samples(root, &manifest.labelled, true)?,
        unlabelled: load_samples(root, &manifest.unlabelled, false)?,
        val: load_samples(root, &manifest.val, true)?,
        test: load_samples(root, &manifest.test, true)?,
    })
}

/// Sorted ids of the PNG files under `root/A`.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("A");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
