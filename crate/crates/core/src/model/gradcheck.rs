//! Finite-difference audit of the network's analytic gradients.
//!
//! The objective is the sum of full-resolution logits for one random image
//! pair, evaluated with running batch-norm statistics (calibrated once on
//! that pair) so the objective is a fixed function of the parameters. Sampled scalars are perturbed by
//! `+/- step` and the central difference is compared against back-prop.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BnMode, C2FNet, Ctx, ModelConfig, ModelParams, Width};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub width: Width,
    pub tile: usize,
    pub samples: usize,
    pub step: f32,
    pub tolerance: f64,
    pub pass_fraction: f64,
    pub seed: u64,
    /// Test hook: analytic gradients of parameters whose name starts with
    /// this prefix are deliberately scaled before comparison.
    pub corrupt_prefix: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            width: Width::new(1, 8).expect("valid width"),
            tile: 32,
            samples: 200,
            step: 1e-3,
            tolerance: 1e-2,
            pass_fraction: 0.95,
            seed: 0,
            corrupt_prefix: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub samples: Vec<GradSample>,
    pub tolerance: f64,
    pub pass_fraction_required: f64,
}

impl GradcheckReport {
    pub fn pass_fraction(&self) -> f64 {
        let ok = self.samples.iter().filter(|s| s.rel_error < self.tolerance).count();
        ok as f64 / self.samples.len().max(1) as f64
    }

    pub fn passed(&self) -> bool {
        !self.samples.is_empty() && self.pass_fraction() >= self.pass_fraction_required
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Distinct parameter names with at least one failing sample.
    pub fn offenders(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .samples
            .iter()
            .filter(|s| s.rel_error >= self.tolerance)
            .map(|s| s.name.as_str())
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

/// `|a - n| / max(|a|, |n|)`, defined as 0 when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn objective(net: &C2FNet, params: &ModelParams, t1: &Tensor, t2: &Tensor) -> Result<f64> {
    Ok(net.predict(params, t1, t2)?.logits.sum())
}

/// Random image pair in `[0, 1]`.
pub fn random_pair(tile: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = || {
        let n = 3 * tile * tile;
        Tensor::from_vec(&[1, 3, tile, tile], (0..n).map(|_| rng.random::<f32>()).collect())
    };
    (img(), img())
}

/// Fresh parameters whose running statistics are set to the batch
/// statistics of `(t1, t2)`, so every layer sees unit-scale activations.
pub fn calibrated_params(net: &C2FNet, seed: u64, t1: &Tensor, t2: &Tensor) -> Result<ModelParams> {
    let mut params = net.init_params(seed)?;
    let graph = Graph::no_grad();
    let (_, _, updates) = net.forward_train(&graph, &params, t1, t2)?;
    params.apply_bn_updates_with(&updates, 1.0)?;
    Ok(params)
}

/// Analytic gradients of the summed logits, keyed by parameter name.
pub fn analytic_gradients(net: &C2FNet, params: &ModelParams, t1: &Tensor, t2: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    let graph = Graph::new();
    let ctx = Ctx::new(&graph, params, BnMode::Eval);
    let out = net.forward(&ctx, &graph.constant(t1.clone()), &graph.constant(t2.clone()))?;
    let total = graph.sum(&out.logits);
    let mut grads = graph.backward(&total);
    Ok(ctx.param_grads(&mut grads))
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.samples == 0 {
        return Err(Error::Config("gradcheck needs at least one sample".into()));
    }
    if cfg.tile == 0 || cfg.tile % 16 != 0 {
        return Err(Error::Config(format!("tile {} must be a positive multiple of 16", cfg.tile)));
    }
    let net = C2FNet::new(ModelConfig::for_width(cfg.width))?;
    let (t1, t2) = random_pair(cfg.tile, cfg.seed.wrapping_add(1));
    let params = calibrated_params(&net, cfg.seed, &t1, &t2)?;
    let mut grads = analytic_gradients(&net, &params, &t1, &t2)?;
    if let Some(prefix) = &cfg.corrupt_prefix {
        for (name, g) in grads.iter_mut() {
            if name.starts_with(prefix.as_str()) {
                *g = g.map(|v| v * 1.5 + 1e-2);
            }
        }
    }

    let names: Vec<&String> = params.trainable().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let picks: Vec<(String, usize)> = (0..cfg.samples)
        .map(|_| {
            let name = names[rng.random_range(0..names.len())];
            let len = params.get(name).expect("listed").len();
            (name.clone(), rng.random_range(0..len))
        })
        .collect();

    let step = cfg.step;
    let results: Vec<Result<GradSample>> = par::map_slice(&picks, |(name, index)| {
        let eval_at = |delta: f32| -> Result<f64> {
            let mut p = params.clone();
            p.get_mut(name).expect("listed").data_mut()[*index] += delta;
            objective(&net, &p, &t1, &t2)
        };
        let plus = eval_at(step)?;
        let minus = eval_at(-step)?;
        // The perturbation actually applied, after f32 rounding.
        let base = params.get(name).expect("listed").data()[*index];
        let h = ((base + step) as f64 - (base - step) as f64).max(f64::MIN_POSITIVE);
        let numeric = (plus - minus) / h;
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[*index] as f64);
        Ok(GradSample {
            name: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        })
    });
    Ok(GradcheckReport {
        samples: results.into_iter().collect::<Result<_>>()?,
        tolerance: cfg.tolerance,
        pass_fraction_required: cfg.pass_fraction,
    })
}
