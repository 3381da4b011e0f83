//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary so
//! the criteria execute in order and report their own timings; pass a
//! substring argument to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use c2f_core::data::{make_split, synth_generate, synth_tile, BiTemporalSample, SynthConfig};
use c2f_core::metrics::{
    compute_metrics, confusion, render_confusion_map, BinaryMask, ConfusionCounts, FN_COLOR, FP_COLOR, TN_COLOR, TP_COLOR,
};
use c2f_core::model::gradcheck::{self, GradcheckConfig};
use c2f_core::model::{C2FNet, ModelConfig, ModelParams, Width};
use c2f_core::trainer::{
    bce_with_logits, consistency_loss, evaluate, run_training, AdamW, EmaState, Mode, TrainConfig, TrainData,
};
use c2f_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, Box<dyn std::error::Error>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+).into());
        }
    };
}

const CRITERIA: [(&str, fn() -> Outcome); 11] = [
    ("split table", split_table),
    ("metric oracle", metric_oracle),
    ("loss identities", loss_identities),
    ("ema dynamics", ema_dynamics),
    ("shape contract", shape_contract),
    ("gradient audit", gradient_audit),
    ("beta zero equivalence", beta_zero),
    ("semi-supervised lift", lift),
    ("ablation harness", ablation_harness),
    ("visualization", visualization),
    ("determinism", determinism),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut passed, mut failed) = (0, 0);
    for (name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()).into())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => {
                passed += 1;
                println!("PASS {name} [{secs:.1}s]: {detail}");
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {e}");
            }
        }
    }
    println!("{passed} passed, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("tile_{i:05}")).collect()
}

fn split_table() -> Outcome {
    let cells = [
        ("GoogleGZ-CD", 740, [(0.05, 37, 703), (0.10, 74, 666), (0.20, 148, 592), (0.30, 222, 518)]),
        ("LEVIR-CD", 5949, [(0.05, 298, 5651), (0.10, 595, 5354), (0.20, 1190, 4759), (0.30, 1785, 4164)]),
        ("WHU-CD", 7122, [(0.05, 357, 6765), (0.10, 713, 6409), (0.20, 1425, 5697), (0.30, 2137, 4985)]),
    ];
    let start = Instant::now();
    for (name, n, ratios) in cells {
        let all = ids(n);
        for (r, k, u) in ratios {
            let m = make_split(name, &all, r, 0)?;
            let got = (m.labelled.len(), m.unlabelled.len());
            ensure!(got == (k, u), "{name} @ {r}: {got:?}, expected ({k}, {u})");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.2}s");
    Ok(format!("12/12 cells exact in {:.0} ms", secs * 1e3))
}

/// Pixel-loop oracle written from the set definitions of each score.
fn oracle(pred: &[u8], gt: &[u8]) -> [f64; 6] {
    let n = pred.len() as f64;
    let (mut inter, mut union, mut pred_pos, mut gt_pos, mut agree) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += f64::from(p & g);
        union += f64::from(p | g);
        pred_pos += f64::from(p);
        gt_pos += f64::from(g);
        agree += f64::from(u8::from(p == g));
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let oa = agree / n;
    let pe = (pred_pos / n) * (gt_pos / n) + (1.0 - pred_pos / n) * (1.0 - gt_pos / n);
    let kc = if 1.0 - pe < 1e-12 { if oa == 1.0 { 1.0 } else { 0.0 } } else { (oa - pe) / (1.0 - pe) };
    [div(2.0 * inter, pred_pos + gt_pos), div(inter, pred_pos), div(inter, gt_pos), oa, kc, div(inter, union)]
}

fn random_pair(rng: &mut ChaCha8Rng) -> (BinaryMask, BinaryMask) {
    let (h, w) = (rng.random_range(1..48), rng.random_range(1..48));
    // Densities include the all-empty and all-full extremes.
    let density = |rng: &mut ChaCha8Rng| [0.0, 1.0, rng.random::<f64>()][rng.random_range(0..3)];
    let (dp, dg) = (density(rng), density(rng));
    let p = (0..h * w).map(|_| u8::from(rng.random_bool(dp))).collect();
    let g = (0..h * w).map(|_| u8::from(rng.random_bool(dg))).collect();
    (BinaryMask::new(h, w, p).unwrap(), BinaryMask::new(h, w, g).unwrap())
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (pred, gt) = random_pair(&mut rng);
        let got = compute_metrics(&confusion(&pred, &gt)?)?.as_array();
        let want = oracle(&pred.data, &gt.data);
        for k in 0..6 {
            let err = (got[k] - want[k]).abs();
            ensure!(err < 1e-9, "pair {i}, metric {k}: {} vs {}", got[k], want[k]);
            worst = worst.max(err);
        }
    }
    let m = compute_metrics(&ConfusionCounts { tp: 3, tn: 4, fp: 1, fn_: 2 })?;
    ensure!((m.f1 - 2.0 / 3.0).abs() < 1e-12, "hand case F1 {}", m.f1);
    ensure!((m.kc - 0.4).abs() < 1e-12, "hand case KC {}", m.kc);
    ensure!((m.iou - 0.5).abs() < 1e-12, "hand case IoU {}", m.iou);
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!("1000 pairs, max deviation {worst:.1e}; hand case F1=2/3 KC=0.4 IoU=0.5"))
}

fn synth_samples(cfg: &SynthConfig, split: &str, n: usize) -> Vec<BiTemporalSample> {
    (0..n).map(|i| synth_tile(cfg, split, i).to_sample()).collect()
}

struct SmallData {
    labelled: Vec<BiTemporalSample>,
    unlabelled: Vec<BiTemporalSample>,
    val: Vec<BiTemporalSample>,
}

impl SmallData {
    fn new() -> Self {
        let cfg = SynthConfig { tile_size: 32, seed: 11, ..SynthConfig::default() };
        let train = synth_samples(&cfg, "train", 16);
        SmallData {
            labelled: train[..6].to_vec(),
            unlabelled: train[6..].iter().map(BiTemporalSample::unlabelled).collect(),
            val: synth_samples(&cfg, "val", 4),
        }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData { labelled: &self.labelled, unlabelled: &self.unlabelled, val: &self.val }
    }
}

fn small_config() -> TrainConfig {
    TrainConfig { width_multiplier: Width::new(1, 8).unwrap(), total_epochs: 3, warmup_epochs: 1, batch_size: 4, seed: 5, ..TrainConfig::default() }
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 4096;
    let targets = Tensor::from_vec(&[n], (0..n).map(|_| rng.random::<f32>()).collect());
    let bce0 = bce_with_logits(&Tensor::zeros(&[n]), &targets)?;
    ensure!((bce0 - std::f64::consts::LN_2).abs() < 1e-6, "BCE at logit 0 is {bce0}");
    for _ in 0..200 {
        let s = Tensor::from_vec(&[64], (0..64).map(|_| rng.random_range(-30.0f32..30.0)).collect());
        let t = Tensor::from_vec(&[64], (0..64).map(|_| rng.random_range(-30.0f32..30.0)).collect());
        let c = consistency_loss(&s, &t)?;
        ensure!(c >= 0.0 && c.is_finite(), "consistency loss {c}");
    }

    let d = SmallData::new();
    let beta = 0.3;
    let cfg = TrainConfig { beta, total_epochs: 2, ..small_config() };
    let out = run_training(&cfg, &d.data(), Mode::Semi, None, &mut |_| {})?;
    let mut worst = 0.0f64;
    for (i, s) in out.steps.iter().enumerate() {
        let gap = (s.loss.total - (s.loss.sup + beta * s.loss.con)).abs();
        ensure!(gap < 1e-6, "step {i}: total {} vs sup {} + beta * con {}", s.loss.total, s.loss.sup, s.loss.con);
        worst = worst.max(gap);
    }
    Ok(format!("BCE(0, y) = ln 2 over {n} targets; consistency >= 0; total identity on {} steps (max gap {worst:.1e})", out.steps.len()))
}

fn params(width: Width, seed: u64) -> ModelParams {
    C2FNet::new(ModelConfig::for_width(width)).unwrap().init_params(seed).unwrap()
}

fn max_gap(a: &ModelParams, b: &ModelParams) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(&p, &q)| (p as f64 - q as f64).abs()))
        .fold(0.0, f64::max)
}

fn ema_dynamics() -> Outcome {
    let w = Width::new(1, 8)?;
    let (teacher0, student) = (params(w, 1), params(w, 2));

    let mut ema = EmaState::new(&teacher0, 0.99)?;
    ema.update(&student)?;
    for ((name, t), ((_, a), (_, b))) in ema.teacher.iter().zip(teacher0.iter().zip(student.iter())) {
        for ((&v, &x), &y) in t.data().iter().zip(a.data()).zip(b.data()) {
            let expected = (0.99 * x as f64 + (1.0 - 0.99) * y as f64) as f32;
            ensure!(v == expected, "{name}: {v} vs {expected}");
        }
    }

    let alpha = 0.95;
    let mut ema = EmaState::new(&teacher0, alpha)?;
    let g0 = max_gap(&teacher0, &student);
    let mut worst = 0.0f64;
    for n in 1..=100 {
        ema.update(&student)?;
        let err = (max_gap(&ema.teacher, &student) - alpha.powi(n) * g0).abs();
        ensure!(err < 1e-6, "step {n}: decay off by {err:.2e}");
        worst = worst.max(err);
    }

    let mut frozen = EmaState::new(&teacher0, 1.0)?;
    for _ in 0..10 {
        frozen.update(&student)?;
    }
    ensure!(frozen.teacher.checksum() == teacher0.checksum(), "alpha = 1 moved the teacher");

    let mut trained = student.clone();
    let ema = EmaState::new(&trained, 0.99)?;
    let before = ema.teacher.checksum();
    let grads: BTreeMap<String, Tensor> = trained.trainable().map(|(n, t)| (n.clone(), Tensor::full(t.shape(), 1.0))).collect();
    let mut opt = AdamW::new(1e-3, 0.0025);
    for _ in 0..3 {
        opt.step(&mut trained, &grads)?;
    }
    ensure!(trained.checksum() != before, "optimiser did not move the student");
    ensure!(ema.teacher.checksum() == before, "optimiser steps changed the teacher");
    Ok(format!("single step exact; 100-step decay within {worst:.1e}; alpha=1 frozen; teacher checksum stable"))
}

fn images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[n, 3, size, size], (0..n * 3 * size * size).map(|_| rng.random::<f32>()).collect())
}

fn shape_contract() -> Outcome {
    let full = C2FNet::new(ModelConfig::for_width(Width::new(1, 1)?))?;
    let p = full.init_params(0)?;
    let (t1, t2) = (images(1, 256, 1), images(1, 256, 2));
    let pred = full.predict(&p, &t1, &t2)?;
    ensure!(pred.logits.shape() == [1, 1, 256, 256], "final logits {:?}", pred.logits.shape());
    ensure!(pred.coarse.shape() == [1, 1, 64, 64], "coarse logits {:?}", pred.coarse.shape());
    let pyramid = full.encode(&p, &t1)?;
    let table = [(64, 1), (128, 2), (256, 4), (512, 8), (512, 16)];
    for (level, (c, s)) in pyramid.levels.iter().zip(table) {
        ensure!(level.stride == s && level.data.shape() == [1, c, 256 / s, 256 / s], "level {:?} at stride {}", level.data.shape(), level.stride);
    }

    let start = Instant::now();
    let quarter = C2FNet::new(ModelConfig::for_width(Width::new(1, 4)?))?;
    let q = quarter.init_params(3)?;
    let a = quarter.predict(&q, &t1, &t2)?;
    let b = quarter.predict(&q, &t2, &t1)?;
    ensure!(a.logits.data() == b.logits.data() && a.coarse.data() == b.coarse.data(), "swapping the dates changed the output");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "w=1/4 symmetry check took {secs:.1}s");
    Ok(format!("256px w=1 gives 256x256 / 64x64 logits, encoder table matches; swap bit-exact at w=1/4 ({secs:.1}s)"))
}

fn gradient_audit() -> Outcome {
    let cfg = GradcheckConfig::default();
    let report = gradcheck::run(&cfg)?;
    let frac = report.pass_fraction();
    let worst = report.worst().map(|s| format!("{} [{}] rel {:.2e}", s.name, s.index, s.rel_error)).unwrap_or_default();
    let detail = format!(
        "{:.1}% of {} samples under {:.0e} relative error at step {:.0e} (need {:.0}%); worst {worst}",
        frac * 100.0,
        report.samples.len(),
        cfg.tolerance,
        cfg.step,
        cfg.pass_fraction * 100.0
    );
    ensure!(report.passed(), "{detail}");
    Ok(detail)
}

fn beta_zero() -> Outcome {
    let d = SmallData::new();
    let cfg = TrainConfig { beta: 0.0, ..small_config() };
    let sup = run_training(&cfg, &d.data(), Mode::Supervised, None, &mut |_| {})?;
    let semi = run_training(&cfg, &d.data(), Mode::Semi, None, &mut |_| {})?;
    ensure!(sup.steps.len() == semi.steps.len(), "{} vs {} steps", sup.steps.len(), semi.steps.len());
    let mut worst = 0.0f64;
    for (i, (a, b)) in sup.steps.iter().zip(&semi.steps).enumerate() {
        let gap = (a.loss.total - b.loss.total).abs().max((a.loss.sup - b.loss.sup).abs());
        ensure!(gap < 1e-6, "step {i}: {} vs {}", a.loss.total, b.loss.total);
        worst = worst.max(gap);
    }
    Ok(format!("{} logged steps agree (max gap {worst:.1e})", sup.steps.len()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn lift() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig::default();
    let train = synth_samples(&synth, "train", synth.n_train);
    let val = synth_samples(&synth, "val", synth.n_val);
    let test = synth_samples(&synth, "test", synth.n_test);
    let train_ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    let by_id: BTreeMap<&str, &BiTemporalSample> = train.iter().map(|s| (s.id.as_str(), s)).collect();

    let (mut sup, mut semi, mut full) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let split = make_split("synth", &train_ids, 0.10, seed)?;
        let labelled: Vec<BiTemporalSample> = split.labelled.iter().map(|id| by_id[id.as_str()].clone()).collect();
        let unlabelled: Vec<BiTemporalSample> = split.unlabelled.iter().map(|id| by_id[id.as_str()].unlabelled()).collect();
        // A narrower decoder than the width default keeps nine 20-epoch
        // runs inside the budget on one core.
        let cfg = TrainConfig { width_multiplier: Width::new(1, 4)?, decoder_width: Some(8), seed, ..TrainConfig::default() };
        let net = C2FNet::new(cfg.model_config())?;
        let test_f1 = |data: &TrainData, mode| -> Result<f64, Box<dyn std::error::Error>> {
            let out = run_training(&cfg, data, mode, None, &mut |_| {})?;
            let best = out.best().ok_or("no validated model")?;
            Ok(evaluate(&net, &best.params, &test, 8, cfg.binarize_threshold)?.metrics()?.f1)
        };
        sup.push(test_f1(&TrainData { labelled: &labelled, unlabelled: &[], val: &val }, Mode::Supervised)?);
        semi.push(test_f1(&TrainData { labelled: &labelled, unlabelled: &unlabelled, val: &val }, Mode::Semi)?);
        full.push(test_f1(&TrainData { labelled: &train, unlabelled: &[], val: &val }, Mode::Supervised)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let (ms, mm, mf) = (median(sup.clone()), median(semi.clone()), median(full.clone()));
    let fmt = |v: &[f64]| v.iter().map(|f| format!("{:.4}", f)).collect::<Vec<_>>().join("/");
    let detail = format!(
        "median test F1 semi@10% {mm:.4} ({}), supervised@10% {ms:.4} ({}), supervised@100% {mf:.4} ({}); {:.1} of 30 min",
        fmt(&semi),
        fmt(&sup),
        fmt(&full),
        secs / 60.0
    );
    ensure!(mm >= ms && mf >= ms && mf >= mm && secs < 1800.0, "{detail}");
    Ok(detail)
}

fn c2f(args: &[&str], dir: &Path) -> Result<String, Box<dyn std::error::Error>> {
    let out = Command::new(env!("CARGO_BIN_EXE_c2f")).args(args).current_dir(dir).env_remove("C2F_SEED").output()?;
    ensure!(
        out.status.success(),
        "c2f {} exited with {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(String::from_utf8(out.stdout)?)
}

/// A 16-tile synthetic dataset with a 25% labelled split under `dir`.
fn cli_dataset(dir: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { n_train: 16, n_val: 4, n_test: 4, tile_size: 16, seed: 2, ..SynthConfig::default() };
    synth_generate(&cfg, &dir.join("data"))?;
    c2f(&["split", "--root", "data", "--ratio", "0.25", "--seed", "1", "--out", "split"], dir)?;
    Ok(())
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    cli_dataset(d)?;
    let body = r#"{"mode": "semi", "dataset_root": "data", "manifest": "split/manifest.json",
        "train": {"total_epochs": 20, "steps_per_epoch": 1, "width_multiplier": "1/8", "batch_size": 2}}"#;
    std::fs::write(d.join("ablate.json"), body)?;
    let mut summary = Vec::new();
    for (sweep, rows) in [("modules", 6), ("warmup", 4), ("beta", 9)] {
        c2f(&["ablate", "--config", "ablate.json", "--sweep", sweep, "--out", "ab"], d)?;
        let mut reader = csv::Reader::from_path(d.join(format!("ab/ablation_{sweep}.csv")))?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name).ok_or(format!("no {name} column"));
        let (status, loss, variant) = (col("status")?, col("final_loss")?, col("variant")?);
        let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
        ensure!(records.len() == rows, "{sweep}: {} rows, expected {rows}", records.len());
        for r in &records {
            ensure!(&r[status] == "ok", "{sweep}/{}: {}", &r[variant], &r[status]);
            let l: f64 = r[loss].parse()?;
            ensure!(l.is_finite(), "{sweep}/{}: final loss {l}", &r[variant]);
        }
        summary.push(format!("{sweep} {rows}"));
    }
    Ok(format!("complete CSVs with finite losses ({} rows)", summary.join(", ")))
}

fn visualization() -> Outcome {
    let palette = [TP_COLOR, TN_COLOR, FP_COLOR, FN_COLOR];
    ensure!(palette == [[255, 255, 255], [0, 0, 0], [255, 0, 0], [0, 0, 255]], "palette {palette:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let (pred, gt) = random_pair(&mut rng);
        let c = confusion(&pred, &gt)?;
        let img = render_confusion_map(&pred, &gt)?;
        let count = |colour: [u8; 3]| img.pixels().filter(|px| px.0 == colour).count() as u64;
        let hist = palette.map(count);
        ensure!(hist == [c.tp, c.tn, c.fp, c.fn_], "pair {i}: histogram {hist:?} vs counts {c:?}");
        ensure!(hist.iter().sum::<u64>() == c.total(), "pair {i}: off-palette pixels");
    }
    Ok("100 pairs, histograms equal counts; palette bytes exact".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    cli_dataset(d)?;
    let same = |a: &str, b: &str| -> Result<(), Box<dyn std::error::Error>> {
        ensure!(std::fs::read(d.join(a))? == std::fs::read(d.join(b))?, "{a} and {b} differ");
        Ok(())
    };
    c2f(&["split", "--root", "data", "--ratio", "0.25", "--seed", "1", "--out", "split2"], d)?;
    same("split/manifest.json", "split2/manifest.json")?;

    let body = r#"{"mode": "semi", "dataset_root": "data", "manifest": "split/manifest.json",
        "train": {"total_epochs": 3, "warmup_epochs": 1, "width_multiplier": "1/8", "batch_size": 2, "seed": 4}}"#;
    std::fs::write(d.join("run.json"), body)?;
    for out in ["r1", "r2"] {
        c2f(&["train", "--config", "run.json", "--out", out], d)?;
    }
    for f in ["train_log.csv", "val_log.csv", "best.json", "checkpoints/best_student.ckpt", "checkpoints/best_teacher.ckpt", "checkpoints/final.ckpt"] {
        same(&format!("r1/{f}"), &format!("r2/{f}"))?;
    }
    for out in ["e1", "e2"] {
        let args = ["eval", "--checkpoint", "r1/checkpoints/best_teacher.ckpt", "--root", "data", "--manifest", "split/manifest.json", "--out", out];
        c2f(&args, d)?;
    }
    same("e1/metrics.csv", "e2/metrics.csv")?;
    same("e1/metrics_per_image.csv", "e2/metrics_per_image.csv")?;
    Ok("split manifests, training logs, checkpoints and metric CSVs byte-identical".into())
}
