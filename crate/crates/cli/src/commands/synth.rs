use c2f_core::data::{synth_generate, SynthConfig};

use crate::args::SynthArgs;
use crate::error::CliError;

pub fn run(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        tile_size: a.tile,
        seed: a.seed.seed.unwrap_or(0),
        ..SynthConfig::default()
    };
    let m = synth_generate(&cfg, &a.out)?;
    println!(
        "wrote {} train / {} val / {} test tiles to {}",
        m.labelled.len(),
        m.val.len(),
        m.test.len(),
        a.out.display()
    );
    Ok(())
}
