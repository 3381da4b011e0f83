use crate::error::{Error, Result};
use crate::model::ModelParams;

/// The teacher network and its averaging state.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub teacher: ModelParams,
    pub alpha: f64,
    pub step: u64,
}

impl EmaState {
    /// Teacher initialised as a copy of the student.
    pub fn new(student: &ModelParams, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA alpha {alpha} must lie in [0, 1]")));
        }
        Ok(EmaState {
            teacher: student.clone(),
            alpha,
            step: 0,
        })
    }

    /// `teacher <- alpha * teacher + (1 - alpha) * student` over every entry,
    /// running statistics included. Each element is rounded to f32 once.
    pub fn update(&mut self, student: &ModelParams) -> Result<()> {
        self.teacher.check_compatible(student)?;
        let a = self.alpha;
        for ((_, t), (_, s)) in self.teacher.iter_mut().zip(student.iter()) {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = (a * *tv as f64 + (1.0 - a) * sv as f64) as f32;
            }
        }
        self.step += 1;
        Ok(())
    }
}
