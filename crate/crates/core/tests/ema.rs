use std::collections::BTreeMap;

use c2f_core::model::{C2FNet, ModelConfig, ModelParams, Width};
use c2f_core::trainer::{AdamW, EmaState};
use c2f_core::Tensor;
use proptest::prelude::*;

fn params(seed: u64) -> ModelParams {
    C2FNet::new(ModelConfig::for_width(Width::new(1, 8).unwrap())).unwrap().init_params(seed).unwrap()
}

fn max_gap(a: &ModelParams, b: &ModelParams) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(&p, &q)| (p as f64 - q as f64).abs()))
        .fold(0.0, f64::max)
}

fn unit_grads(p: &ModelParams) -> BTreeMap<String, Tensor> {
    p.trainable().map(|(n, t)| (n.clone(), Tensor::full(t.shape(), 1.0))).collect()
}

#[test]
fn single_step_matches_the_update_rule() {
    let (teacher0, student) = (params(1), params(2));
    let mut ema = EmaState::new(&teacher0, 0.99).unwrap();
    ema.update(&student).unwrap();
    assert_eq!(ema.step, 1);
    for ((name, t), ((_, t0), (_, s))) in ema.teacher.iter().zip(teacher0.iter().zip(student.iter())) {
        for ((&v, &a), &b) in t.data().iter().zip(t0.data()).zip(s.data()) {
            let expected = (0.99 * a as f64 + (1.0 - 0.99) * b as f64) as f32;
            assert_eq!(v, expected, "{name}");
        }
    }
}

#[test]
fn gap_to_a_fixed_student_decays_geometrically() {
    let (teacher0, student) = (params(1), params(2));
    let alpha = 0.95;
    let mut ema = EmaState::new(&teacher0, alpha).unwrap();
    let g0 = max_gap(&teacher0, &student);
    for n in 1..=100 {
        ema.update(&student).unwrap();
        let predicted = alpha.powi(n) * g0;
        assert!((max_gap(&ema.teacher, &student) - predicted).abs() < 1e-6, "step {n}");
    }
}

#[test]
fn alpha_one_freezes_and_zero_copies() {
    let (teacher0, student) = (params(1), params(2));
    let mut frozen = EmaState::new(&teacher0, 1.0).unwrap();
    let mut copying = EmaState::new(&teacher0, 0.0).unwrap();
    for _ in 0..5 {
        frozen.update(&student).unwrap();
        copying.update(&student).unwrap();
    }
    assert_eq!(frozen.teacher.checksum(), teacher0.checksum());
    assert_eq!(copying.teacher.checksum(), student.checksum());
    assert!(EmaState::new(&teacher0, 1.5).is_err());
}

#[test]
fn optimiser_steps_leave_the_teacher_alone() {
    let mut student = params(3);
    let ema = EmaState::new(&student, 0.99).unwrap();
    let before = ema.teacher.checksum();
    let mut opt = AdamW::new(1e-3, 0.0025);
    let grads = unit_grads(&student);
    for _ in 0..3 {
        opt.step(&mut student, &grads).unwrap();
    }
    assert_ne!(student.checksum(), before);
    assert_eq!(ema.teacher.checksum(), before);
}

#[test]
fn adamw_first_step_moves_by_the_learning_rate() {
    // With bias correction the first Adam step is lr * sign(g), followed by
    // the decoupled decay w *= 1 - lr * wd.
    let mut p = params(4);
    let start = p.clone();
    let (lr, wd) = (1e-2f32, 0.1f32);
    let mut opt = AdamW::new(lr, wd);
    opt.step(&mut p, &unit_grads(&start)).unwrap();
    for (name, t) in p.trainable() {
        let t0 = start.get(name).unwrap();
        for (&w, &w0) in t.data().iter().zip(t0.data()) {
            let expected = w0 as f64 * (1.0 - (lr * wd) as f64) - lr as f64;
            assert!((w as f64 - expected).abs() < 1e-6, "{name}: {w} vs {expected}");
        }
    }
    for name in p.names().filter(|n| ModelParams::is_buffer(n)) {
        assert_eq!(p.get(name), start.get(name), "buffers are not optimised");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ema_stays_between_teacher_and_student(alpha in 0.0f64..=1.0, steps in 1usize..6) {
        let (teacher0, student) = (params(5), params(6));
        let mut ema = EmaState::new(&teacher0, alpha).unwrap();
        for _ in 0..steps {
            ema.update(&student).unwrap();
        }
        for ((_, t), ((_, a), (_, b))) in ema.teacher.iter().zip(teacher0.iter().zip(student.iter())) {
            for ((&v, &x), &y) in t.data().iter().zip(a.data()).zip(b.data()) {
                let (lo, hi) = (x.min(y), x.max(y));
                prop_assert!(v >= lo && v <= hi);
            }
        }
    }
}
