use c2f_core::model::gradcheck::{self, GradcheckConfig};

use crate::args::GradcheckArgs;
use crate::error::CliError;

pub fn run(a: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = GradcheckConfig {
        width: a.width,
        tile: a.tile,
        samples: a.samples as usize,
        step: a.step,
        tolerance: a.tolerance,
        seed: a.seed.seed.unwrap_or(0),
        corrupt_prefix: a.corrupt.clone(),
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: {:.1}% of {} sampled parameters within relative error {} (required {:.0}%)",
        100.0 * report.pass_fraction(),
        report.samples.len(),
        report.tolerance,
        100.0 * report.pass_fraction_required
    );
    if let Some(w) = report.worst() {
        println!(
            "worst: {}[{}] relative error {:.3e} (analytic {:.6e}, numeric {:.6e})",
            w.name, w.index, w.rel_error, w.analytic, w.numeric
        );
    }
    if report.passed() {
        return Ok(());
    }
    let offenders = report.offenders();
    println!("offending parameters: {}", offenders.join(", "));
    Err(CliError::Failed(format!("gradient audit failed for {} parameters", offenders.len())))
}
