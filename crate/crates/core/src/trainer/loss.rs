use crate::error::{contract, Result};
use crate::kernels::pointwise::{sigmoid, softplus};
use crate::tensor::Tensor;

/// Mean of `softplus(x) - x*y`, the stable form of
/// `-[y ln s(x) + (1-y) ln(1 - s(x))]`.
pub fn bce_with_logits_value(logits: &[f32], targets: &[f32]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            softplus(x) - x * y
        })
        .sum::<f64>()
        / n
}

pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    contract!(logits.shape() == targets.shape(), "bce: logits {:?} vs targets {:?}", logits.shape(), targets.shape());
    contract!(!logits.is_empty(), "bce over an empty tensor");
    Ok(bce_with_logits_value(logits.data(), targets.data()))
}

/// Soft pseudo-labels from teacher logits.
pub fn soft_targets(teacher_logits: &Tensor) -> Tensor {
    teacher_logits.map(sigmoid)
}

/// BCE of the student against the teacher's sigmoid map.
pub fn consistency_loss(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<f64> {
    bce_with_logits(student_logits, &soft_targets(teacher_logits))
}
