use std::collections::BTreeSet;

use c2f_core::data::{
    collate, labelled_count, list_ids, load_binary_mask, load_dataset, load_samples, make_split, synth_generate,
    synth_tile, SplitManifest, SynthConfig,
};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("tile_{i:05}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_the_ids(n in 1usize..400, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let all = ids(n);
        let m = make_split("p", &all, ratio, seed).unwrap();
        prop_assert_eq!(m.labelled.len(), labelled_count(n, ratio));
        prop_assert_eq!(m.labelled.len() + m.unlabelled.len(), n);
        let l: BTreeSet<_> = m.labelled.iter().collect();
        prop_assert!(m.unlabelled.iter().all(|id| !l.contains(id)));
        prop_assert_eq!(m.train_ids(), all.clone());
        prop_assert_eq!(make_split("p", &all, ratio, seed).unwrap(), m);
    }

    #[test]
    fn labelled_count_is_the_ceiling(n in 1usize..10_000, pct in 0u32..=100) {
        let ratio = pct as f64 / 100.0;
        let k = labelled_count(n, ratio);
        // Exact integer ceiling of n * pct / 100.
        prop_assert_eq!(k, (n * pct as usize).div_ceil(100));
    }
}

#[test]
fn published_split_counts() {
    // (train total, [(ratio, labelled, unlabelled)]) for the three benchmark datasets.
    let cells = [
        (740, [(0.05, 37, 703), (0.10, 74, 666), (0.20, 148, 592), (0.30, 222, 518)]),
        (5949, [(0.05, 298, 5651), (0.10, 595, 5354), (0.20, 1190, 4759), (0.30, 1785, 4164)]),
        (7122, [(0.05, 357, 6765), (0.10, 713, 6409), (0.20, 1425, 5697), (0.30, 2137, 4985)]),
    ];
    for (n, ratios) in cells {
        for (r, k, u) in ratios {
            let m = make_split("d", &ids(n), r, 0).unwrap();
            assert_eq!((m.labelled.len(), m.unlabelled.len()), (k, u), "{n} @ {r}");
        }
    }
}

#[test]
fn synthetic_masks_are_the_changed_footprints() {
    let cfg = SynthConfig { tile_size: 48, seed: 3, ..SynthConfig::default() };
    for i in 0..20 {
        let tile = synth_tile(&cfg, "train", i);
        for y in 0..48 {
            for x in 0..48 {
                let in1 = tile.shapes.iter().any(|s| s.in_t1 && s.contains(x, y));
                let in2 = tile.shapes.iter().any(|s| s.in_t2 && s.contains(x, y));
                let expected = if in1 != in2 { 255 } else { 0 };
                assert_eq!(tile.mask.get_pixel(x as u32, y as u32)[0], expected, "tile {i} ({x}, {y})");
            }
        }
    }
}

#[test]
fn synthetic_tiles_do_not_depend_on_set_sizes() {
    let small = SynthConfig { n_train: 3, ..SynthConfig::default() };
    let large = SynthConfig { n_train: 300, ..SynthConfig::default() };
    let (a, b) = (synth_tile(&small, "val", 2), synth_tile(&large, "val", 2));
    assert_eq!(a.t1, b.t1);
    assert_eq!(a.mask, b.mask);
    assert_ne!(synth_tile(&small, "val", 2).t1, synth_tile(&small, "test", 2).t1);
}

#[test]
fn unchanged_pixels_are_not_identical_across_dates() {
    let tile = synth_tile(&SynthConfig::default(), "train", 0);
    let differing = tile
        .t1
        .pixels()
        .zip(tile.t2.pixels())
        .zip(tile.mask.pixels())
        .filter(|((a, b), m)| m[0] == 0 && a != b)
        .count();
    assert!(differing > 0);
}

#[test]
fn generated_dataset_loads_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_train: 6, n_val: 2, n_test: 2, tile_size: 32, ..SynthConfig::default() };
    let manifest = synth_generate(&cfg, dir.path()).unwrap();
    assert_eq!(SplitManifest::load(&dir.path().join("manifest.json")).unwrap(), manifest);
    assert_eq!(list_ids(dir.path()).unwrap().len(), 10);

    let split = make_split("synth", &manifest.labelled, 0.5, 1).unwrap();
    let data = load_dataset(dir.path(), &SplitManifest { val: manifest.val.clone(), test: manifest.test.clone(), ..split }).unwrap();
    assert_eq!((data.labelled.len(), data.unlabelled.len(), data.val.len(), data.test.len()), (3, 3, 2, 2));
    assert!(data.unlabelled.iter().all(|s| s.label.is_none()));
    for s in data.labelled.iter().chain(&data.val) {
        let index: usize = s.id.rsplit('_').next().unwrap().parse().unwrap();
        let split = s.id.split('_').next().unwrap();
        assert_eq!(*s, synth_tile(&cfg, split, index).to_sample());
    }
    let (t1, _, labels) = collate(&data.labelled.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(t1.shape(), [3, 3, 32, 32]);
    assert_eq!(labels.unwrap().shape(), [3, 1, 32, 32]);
}

#[test]
fn unlabelled_loading_never_opens_label_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_train: 2, n_val: 1, n_test: 1, tile_size: 16, ..SynthConfig::default() };
    let m = synth_generate(&cfg, dir.path()).unwrap();
    std::fs::remove_dir_all(dir.path().join("label")).unwrap();
    let samples = load_samples(dir.path(), &m.labelled, false).unwrap();
    assert_eq!(samples.len(), 2);
    let err = load_samples(dir.path(), &m.labelled, true).unwrap_err().to_string();
    assert!(err.contains(&m.labelled[0]) || err.contains(&m.labelled[1]), "{err}");
}

#[test]
fn masks_must_be_binary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    image::GrayImage::from_raw(2, 1, vec![0, 128]).unwrap().save(&path).unwrap();
    let err = load_binary_mask(&path).unwrap_err().to_string();
    assert!(err.contains("128"), "{err}");
    image::GrayImage::from_raw(2, 1, vec![0, 255]).unwrap().save(&path).unwrap();
    assert_eq!(load_binary_mask(&path).unwrap().data, vec![0, 1]);
}

#[test]
fn overlapping_lists_are_rejected() {
    let mut m = make_split("d", &ids(10), 0.3, 0).unwrap();
    m.val = vec![m.labelled[0].clone()];
    assert!(m.validate().is_err());
}
