//! Synthetic bi-temporal tiles: a smooth textured background shared by both
//! dates, rectangles and ellipses that appear or disappear between them, and
//! a global brightness jitter on the second date so unchanged pixels are not
//! identical.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BiTemporalSample, SplitManifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub tile_size: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub change_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 200,
            n_val: 20,
            n_test: 40,
            tile_size: 64,
            shapes_min: 2,
            shapes_max: 6,
            change_prob: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            problems.push("n_train, n_val and n_test must all be at least 1".to_string());
        }
        if self.tile_size == 0 || self.tile_size % 16 != 0 {
            problems.push(format!("tile_size {} must be a positive multiple of 16", self.tile_size));
        }
        if self.shapes_min > self.shapes_max {
            problems.push(format!("shapes_min {} exceeds shapes_max {}", self.shapes_min, self.shapes_max));
        }
        if !(0.0..=1.0).contains(&self.change_prob) {
            problems.push(format!("change_prob {} must lie in [0, 1]", self.change_prob));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// One inserted shape. A shape present on only one date is a change.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthShape {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
    pub color: [f32; 3],
    pub in_t1: bool,
    pub in_t2: bool,
}

impl SynthShape {
    /// Whether pixel `(x, y)` (sampled at its centre) lies inside.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f32 + 0.5 - self.cx) / self.rx;
        let dy = (y as f32 + 0.5 - self.cy) / self.ry;
        match self.kind {
            ShapeKind::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }

    pub fn changed(&self) -> bool {
        self.in_t1 != self.in_t2
    }
}

pub struct SynthTile {
    pub id: String,
    pub t1: RgbImage,
    pub t2: RgbImage,
    /// 255 where the footprint unions of the two dates differ.
    pub mask: GrayImage,
    pub shapes: Vec<SynthShape>,
}

impl SynthTile {
    /// The tile as the loader would read it back from disk.
    pub fn to_sample(&self) -> BiTemporalSample {
        let rgb = |img: &RgbImage| {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut data = vec![0.0f32; 3 * h * w];
            for (i, px) in img.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * h * w + i] = px[ch] as f32 / 255.0;
                }
            }
            Tensor::from_vec(&[3, h, w], data)
        };
        let (w, h) = (self.mask.width() as usize, self.mask.height() as usize);
        let label = self.mask.pixels().map(|p| if p[0] == 255 { 1.0 } else { 0.0 }).collect();
        BiTemporalSample {
            id: self.id.clone(),
            image_t1: rgb(&self.t1),
            image_t2: rgb(&self.t2),
            label: Some(Tensor::from_vec(&[1, h, w], label)),
        }
    }
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Bilinear value noise with one lattice point every `spacing` pixels.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, spacing: usize, amp: f32) -> Vec<f32> {
    let n = size / spacing + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random_range(-amp..amp)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f32 / spacing as f32;
        let (y0, ty) = (fy as usize, fy.fract());
        for x in 0..size {
            let fx = x as f32 / spacing as f32;
            let (x0, tx) = (fx as usize, fx.fract());
            let at = |r: usize, c: usize| lattice[r * n + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn random_shape(rng: &mut ChaCha8Rng, size: usize, base: [f32; 3]) -> SynthShape {
    let s = size as f32;
    let kind = if rng.random_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse };
    let (lo, hi) = (s / 16.0, s / 6.0);
    // A colour clearly separated from the background's mean tone.
    let mut color = [0.0; 3];
    let mut best = -1.0;
    for _ in 0..16 {
        let c: [f32; 3] = std::array::from_fn(|_| rng.random::<f32>());
        let d = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0;
        if d > best {
            best = d;
            color = c;
        }
        if d >= 0.3 {
            break;
        }
    }
    SynthShape {
        kind,
        cx: rng.random_range(0.0..s),
        cy: rng.random_range(0.0..s),
        rx: rng.random_range(lo..hi),
        ry: rng.random_range(lo..hi),
        color,
        in_t1: true,
        in_t2: true,
    }
}

/// Generates tile `index` of `split` ("train", "val" or "test"). Each tile
/// has its own random stream, so tiles do not depend on the set sizes.
pub fn synth_tile(cfg: &SynthConfig, split: &str, index: usize) -> SynthTile {
    let split_code = SPLITS.iter().position(|s| *s == split).unwrap_or(SPLITS.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((split_code << 40) | index as u64);
    let size = cfg.tile_size;

    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let background: Vec<Vec<f32>> = base
        .iter()
        .map(|&b| {
            let coarse = value_noise(&mut rng, size, (size / 4).max(1), 0.15);
            let fine = value_noise(&mut rng, size, (size / 16).max(1), 0.05);
            coarse.iter().zip(&fine).map(|(c, f)| b + c + f).collect()
        })
        .collect();

    // Changed shapes never overlap each other, and unchanged shapes are
    // painted on top, so the visible change is exactly the symmetric
    // difference of the two dates' footprints.
    let count = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    let mut changed_area = vec![false; size * size];
    let mut changed = Vec::new();
    let mut kept = Vec::new();
    for _ in 0..count {
        let mut shape = random_shape(&mut rng, size, base);
        if rng.random_bool(cfg.change_prob) {
            if rng.random_bool(0.5) {
                shape.in_t2 = false;
            } else {
                shape.in_t1 = false;
            }
            let footprint: Vec<usize> = (0..size * size).filter(|&i| shape.contains(i % size, i / size)).collect();
            if footprint.iter().any(|&i| changed_area[i]) {
                continue;
            }
            footprint.iter().for_each(|&i| changed_area[i] = true);
            changed.push(shape);
        } else {
            kept.push(shape);
        }
    }
    let shapes: Vec<SynthShape> = changed.into_iter().chain(kept).collect();

    let gain = rng.random_range(0.9f32..1.1);
    let offset: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.04f32..0.04));
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut t1 = RgbImage::new(size as u32, size as u32);
    let mut t2 = RgbImage::new(size as u32, size as u32);
    let mut mask = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let bg: [f32; 3] = std::array::from_fn(|c| background[c][i]);
            let (mut c1, mut c2) = (bg, bg);
            let (mut u1, mut u2) = (false, false);
            for s in &shapes {
                if s.contains(x, y) {
                    if s.in_t1 {
                        c1 = s.color;
                        u1 = true;
                    }
                    if s.in_t2 {
                        c2 = s.color;
                        u2 = true;
                    }
                }
            }
            t1.put_pixel(x as u32, y as u32, Rgb(c1.map(quantize)));
            t2.put_pixel(x as u32, y as u32, Rgb(std::array::from_fn(|c| quantize(c2[c] * gain + offset[c]))));
            mask.put_pixel(x as u32, y as u32, Luma([if u1 != u2 { 255 } else { 0 }]));
        }
    }
    SynthTile {
        id: format!("{split}_{index:04}"),
        t1,
        t2,
        mask,
        shapes,
    }
}

/// Writes the A/, B/, label/ layout plus `manifest.json` (all training
/// tiles labelled) under `root` and returns the manifest.
pub fn synth_generate(cfg: &SynthConfig, root: &Path) -> Result<SplitManifest> {
    cfg.validate()?;
    for dir in ["A", "B", "label"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut lists: [Vec<String>; 3] = Default::default();
    for (k, (split, n)) in SPLITS.iter().zip([cfg.n_train, cfg.n_val, cfg.n_test]).enumerate() {
        for i in 0..n {
            let tile = synth_tile(cfg, split, i);
            let file = format!("{}.png", tile.id);
            let save = |dir: &str, res: image::ImageResult<()>| {
                res.map_err(|e| Error::Data(format!("writing {dir}/{file}: {e}")))
            };
            save("A", tile.t1.save(root.join("A").join(&file)))?;
            save("B", tile.t2.save(root.join("B").join(&file)))?;
            save("label", tile.mask.save(root.join("label").join(&file)))?;
            lists[k].push(tile.id);
        }
    }
    let [train, val, test] = lists;
    let manifest = SplitManifest {
        dataset: "synth".into(),
        seed: cfg.seed,
        ratio: 1.0,
        labelled: train,
        unlabelled: Vec::new(),
        val,
        test,
    };
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}
