//! Bi-temporal samples, tiling, labelled/unlabelled split manifests, the
//! on-disk PNG layout and a synthetic change generator.

mod io;
mod split;
mod synth;

pub use io::{list_ids, load_binary_mask, load_dataset, load_rgb, load_samples, save_mask_png, LoadedDataset};
pub use split::{labelled_count, make_split, SplitManifest};
pub use synth::{synth_generate, synth_tile, ShapeKind, SynthConfig, SynthShape, SynthTile};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Two co-registered RGB tiles `[3, s, s]` in `[0, 1]` and, for labelled
/// samples, a `{0, 1}` change mask `[1, s, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalSample {
    pub id: String,
    pub image_t1: Tensor,
    pub image_t2: Tensor,
    pub label: Option<Tensor>,
}

impl BiTemporalSample {
    pub fn height(&self) -> usize {
        self.image_t1.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image_t1.shape()[2]
    }

    /// Copy without the mask, as seen by the unlabelled stream.
    pub fn unlabelled(&self) -> Self {
        BiTemporalSample {
            label: None,
            ..self.clone()
        }
    }
}

/// Stacks samples into `[n, 3, s, s]` image batches and, when every
/// sample is labelled, an `[n, 1, s, s]` mask batch.
pub fn collate(samples: &[&BiTemporalSample]) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    contract!(!samples.is_empty(), "cannot collate an empty batch");
    let shape = samples[0].image_t1.shape();
    for s in samples {
        contract!(
            s.image_t1.shape() == shape && s.image_t2.shape() == shape,
            "sample {} has shape {:?}, batch expects {shape:?}",
            s.id,
            s.image_t1.shape()
        );
    }
    let t1 = Tensor::stack(&samples.iter().map(|s| &s.image_t1).collect::<Vec<_>>());
    let t2 = Tensor::stack(&samples.iter().map(|s| &s.image_t2).collect::<Vec<_>>());
    let labels: Option<Vec<&Tensor>> = samples.iter().map(|s| s.label.as_ref()).collect();
    Ok((t1, t2, labels.map(|l| Tensor::stack(&l))))
}

fn crop(t: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let (c, w) = (t.shape()[0], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * t.shape()[1] + y) * w;
            out.extend_from_slice(&d[row + left..row + left + size]);
        }
    }
    Tensor::from_vec(&[c, size, size], out)
}

/// Cuts an image pair (and mask) into non-overlapping `size` tiles in
/// row-major grid order; remainder pixels at the right and bottom are
/// dropped. Ids are `{source}_r{row}_c{col}`.
pub fn tile_pair(
    source: &str,
    image_t1: &Tensor,
    image_t2: &Tensor,
    label: Option<&Tensor>,
    size: usize,
) -> Result<Vec<BiTemporalSample>> {
    contract!(size > 0, "tile size must be positive");
    contract!(image_t1.rank() == 3 && image_t1.shape()[0] == 3, "expected [3, h, w] image, got {:?}", image_t1.shape());
    contract!(image_t1.shape() == image_t2.shape(), "images differ in shape: {:?} vs {:?}", image_t1.shape(), image_t2.shape());
    let (h, w) = (image_t1.shape()[1], image_t1.shape()[2]);
    if let Some(l) = label {
        contract!(l.shape() == [1, h, w], "mask shape {:?} does not match {h}x{w} images", l.shape());
    }
    if h < size || w < size {
        log::warn!("{source}: {h}x{w} is smaller than the {size}px tile, no tiles produced");
        return Ok(Vec::new());
    }
    let mut tiles = Vec::with_capacity((h / size) * (w / size));
    for r in 0..h / size {
        for c in 0..w / size {
            let (top, left) = (r * size, c * size);
            tiles.push(BiTemporalSample {
                id: format!("{source}_r{r}_c{c}"),
                image_t1: crop(image_t1, top, left, size),
                image_t2: crop(image_t2, top, left, size),
                label: label.map(|l| crop(l, top, left, size)),
            });
        }
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|i| i as f32).collect())
    }

    #[test]
    fn tile_counts() {
        let cases = [((1024, 1024), 256, 16), ((256, 256), 256, 1), ((300, 300), 256, 1), ((100, 300), 256, 0)];
        for ((h, w), size, n) in cases {
            let img = ramp(3, h, w);
            assert_eq!(tile_pair("s", &img, &img, None, size).unwrap().len(), n, "{h}x{w}");
        }
    }

    #[test]
    fn tiles_reassemble_to_the_cropped_source() {
        let (h, w, size) = (70, 50, 16);
        let img = ramp(3, h, w);
        let mask = ramp(1, h, w);
        let tiles = tile_pair("src", &img, &img, Some(&mask), size).unwrap();
        assert_eq!(tiles[4].id, "src_r1_c1");
        let cols = w / size;
        for ch in 0..3 {
            for y in 0..(h / size) * size {
                for x in 0..cols * size {
                    let t = &tiles[(y / size) * cols + x / size];
                    let v = t.image_t1.data()[(ch * size + y % size) * size + x % size];
                    assert_eq!(v, img.data()[(ch * h + y) * w + x]);
                    if ch == 0 {
                        let m = t.label.as_ref().unwrap().data()[(y % size) * size + x % size];
                        assert_eq!(m, mask.data()[y * w + x]);
                    }
                }
            }
        }
    }
}
