//! Input perturbations for the consistency branch: flips shared by both
//! dates plus independent Gaussian noise on the student's view.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub flip_prob: f64,
    /// Standard deviation in input-intensity units.
    pub noise_std: f64,
    /// When false the teacher also sees noise (but never flips).
    pub teacher_clean: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            flip_prob: 0.5,
            noise_std: 0.02,
            teacher_clean: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flip {
    pub horizontal: bool,
    pub vertical: bool,
}

/// Flips each sample of an `[n, c, h, w]` tensor by its own [`Flip`].
pub fn flip_batch(t: &Tensor, flips: &[Flip]) -> Tensor {
    let (n, c, h, w) = t.dims4();
    assert_eq!(n, flips.len(), "one flip per sample");
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for (s, f) in flips.iter().enumerate() {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for y in 0..h {
                let sy = if f.vertical { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if f.horizontal { w - 1 - x } else { x };
                    out[base + y * w + x] = src[base + sy * w + sx];
                }
            }
        }
    }
    Tensor::from_vec(t.shape(), out)
}

fn add_noise(t: &Tensor, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if std == 0.0 {
        return t.clone();
    }
    let normal = Normal::new(0.0, std).expect("finite noise std");
    let data = t.data().iter().map(|&v| v + normal.sample(rng) as f32).collect();
    Tensor::from_vec(t.shape(), data)
}

/// Student and teacher views of one unlabelled batch.
pub struct Views {
    pub student: (Tensor, Tensor),
    pub teacher: (Tensor, Tensor),
    /// Applied to the student's view; teacher outputs must be flipped the
    /// same way before they serve as targets.
    pub flips: Vec<Flip>,
}

pub fn make_views(cfg: &PerturbationConfig, t1: &Tensor, t2: &Tensor, rng: &mut ChaCha8Rng) -> Views {
    let flips: Vec<Flip> = (0..t1.shape()[0])
        .map(|_| Flip {
            horizontal: rng.random_bool(cfg.flip_prob),
            vertical: rng.random_bool(cfg.flip_prob),
        })
        .collect();
    let student = (
        add_noise(&flip_batch(t1, &flips), cfg.noise_std, rng),
        add_noise(&flip_batch(t2, &flips), cfg.noise_std, rng),
    );
    let teacher = if cfg.teacher_clean {
        (t1.clone(), t2.clone())
    } else {
        (add_noise(t1, cfg.noise_std, rng), add_noise(t2, cfg.noise_std, rng))
    };
    Views { student, teacher, flips }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flips_are_involutions() {
        let t = Tensor::from_vec(&[2, 1, 2, 3], (0..12).map(|i| i as f32).collect());
        let flips = [Flip { horizontal: true, vertical: false }, Flip { horizontal: true, vertical: true }];
        let f = flip_batch(&t, &flips);
        assert_eq!(&f.data()[..6], &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(&f.data()[6..], &[11.0, 10.0, 9.0, 8.0, 7.0, 6.0]);
        assert_eq!(flip_batch(&f, &flips), t);
    }

    #[test]
    fn clean_teacher_and_shared_flips() {
        let cfg = PerturbationConfig { flip_prob: 1.0, noise_std: 0.0, teacher_clean: true };
        let t1 = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let t2 = t1.map(|v| v * 10.0);
        let views = make_views(&cfg, &t1, &t2, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(views.teacher.0, t1);
        assert_eq!(views.student.0.data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(views.student.1, views.student.0.map(|v| v * 10.0));
    }
}
