//! Layer building blocks evaluated against a parameter source.
//!
//! [`Ctx`] either reads parameters from a [`ModelParams`] or, in init mode,
//! creates them on first use. Running the network once in init mode is how
//! fresh parameters are built, so the layout can never drift from the
//! wiring.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ModelParams;
use super::ModelConfig;
use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::norm::BatchStats;
use crate::kernels::ConvSpec;
use crate::tensor::Tensor;

/// Which statistics batch-norm layers use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Batch statistics observed by one batch-norm layer in a training forward.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: String,
    pub stats: BatchStats,
}

enum Init {
    Kaiming { fan_in: usize },
    Const(f32),
}

enum Source<'a> {
    Params(&'a ModelParams),
    Init {
        rng: RefCell<ChaCha8Rng>,
        entries: RefCell<BTreeMap<String, Tensor>>,
    },
}

/// Evaluation context shared by all layers of one forward pass.
pub struct Ctx<'a> {
    graph: &'a Graph,
    source: Source<'a>,
    mode: BnMode,
    leaves: RefCell<BTreeMap<String, Var>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a Graph, params: &'a ModelParams, mode: BnMode) -> Self {
        Ctx {
            graph,
            source: Source::Params(params),
            mode,
            leaves: RefCell::default(),
            bn_updates: RefCell::default(),
        }
    }

    /// A context that creates parameters as layers ask for them.
    pub fn for_init(graph: &'a Graph, rng: ChaCha8Rng) -> Self {
        Ctx {
            graph,
            source: Source::Init {
                rng: RefCell::new(rng),
                entries: RefCell::default(),
            },
            mode: BnMode::Eval,
            leaves: RefCell::default(),
            bn_updates: RefCell::default(),
        }
    }

    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Parameters created so far in init mode.
    pub fn into_params(self, config: ModelConfig) -> Option<ModelParams> {
        match self.source {
            Source::Init { entries, .. } => Some(ModelParams::from_entries(config, entries.into_inner())),
            Source::Params(_) => None,
        }
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Gradient for every parameter used in this pass, by name.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.take(var).map(|g| (name.clone(), g)))
            .collect()
    }

    fn fetch(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        match &self.source {
            Source::Params(p) => {
                let t = p
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
                if t.shape() != shape {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, wiring expects {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t.clone())
            }
            Source::Init { rng, entries } => {
                if let Some(t) = entries.borrow().get(name) {
                    return Ok(t.clone());
                }
                let t = match init {
                    Init::Const(v) => Tensor::full(shape, v),
                    Init::Kaiming { fan_in } => {
                        let bound = (6.0 / fan_in as f32).sqrt();
                        let mut rng = rng.borrow_mut();
                        let n: usize = shape.iter().product();
                        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
                    }
                };
                entries.borrow_mut().insert(name.to_string(), t.clone());
                Ok(t)
            }
        }
    }

    /// Trainable parameter as a tape leaf, shared across repeated uses.
    fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self.fetch(name, shape, init)?;
        let v = self.graph.leaf(t);
        self.leaves.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Convolution; weights use Kaiming-uniform init, biases start at zero.
    pub fn conv(&self, name: &str, x: &Var, cout: usize, spec: ConvSpec, bias: bool) -> Result<Var> {
        let cin = x.shape()[1];
        let (kh, kw) = spec.kernel;
        let w = self.param(
            &format!("{name}.weight"),
            &[cout, cin, kh, kw],
            Init::Kaiming { fan_in: cin * kh * kw },
        )?;
        let b = if bias {
            Some(self.param(&format!("{name}.bias"), &[cout], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(self.graph.conv2d(x, &w, b.as_ref(), spec))
    }

    pub fn batch_norm(&self, name: &str, x: &Var) -> Result<Var> {
        let c = x.shape()[1];
        let gamma = self.param(&format!("{name}.gamma"), &[c], Init::Const(1.0))?;
        let beta = self.param(&format!("{name}.beta"), &[c], Init::Const(0.0))?;
        let rm = self.fetch(&format!("{name}.running_mean"), &[c], Init::Const(0.0))?;
        let rv = self.fetch(&format!("{name}.running_var"), &[c], Init::Const(1.0))?;
        match self.mode {
            BnMode::Train => {
                let (y, stats) = self.graph.batch_norm_train(x, &gamma, &beta);
                self.bn_updates.borrow_mut().push(BnUpdate {
                    layer: name.to_string(),
                    stats,
                });
                Ok(y)
            }
            BnMode::Eval => Ok(self.graph.batch_norm_eval(x, &gamma, &beta, &rm, &rv)),
        }
    }

    /// Convolution (no bias) followed by batch-norm, no activation.
    pub fn basic_conv(&self, name: &str, x: &Var, cout: usize, spec: ConvSpec) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv"), x, cout, spec, false)?;
        self.batch_norm(&format!("{name}.bn"), &y)
    }
}

fn hidden_width(channels: usize) -> usize {
    (channels / 16).max(4)
}

/// Channel gate from a global max-pool squeezed through a 1x1 bottleneck.
pub fn channel_attention(ctx: &Ctx, name: &str, x: &Var) -> Result<Var> {
    let g = ctx.graph();
    let c = x.shape()[1];
    let pooled = g.global_max_pool(x);
    let h = ctx.conv(&format!("{name}.down"), &pooled, hidden_width(c), ConvSpec::same(1), false)?;
    let h = g.relu(&h);
    let a = ctx.conv(&format!("{name}.up"), &h, c, ConvSpec::same(1), false)?;
    let gate = g.sigmoid(&a);
    Ok(g.mul(x, &gate))
}

/// Kernel size of the spatial-attention convolution.
pub const SPATIAL_KERNEL: usize = 7;

/// Spatial gate from the per-pixel channel maximum.
pub fn spatial_attention(ctx: &Ctx, name: &str, x: &Var) -> Result<Var> {
    let g = ctx.graph();
    let m = g.channel_max(x);
    let s = ctx.conv(&format!("{name}.conv"), &m, 1, ConvSpec::same(SPATIAL_KERNEL), false)?;
    let gate = g.sigmoid(&s);
    Ok(g.mul(x, &gate))
}

/// Global context module: four dilated branches plus a 1x1 shortcut.
pub fn gcm(ctx: &Ctx, name: &str, x: &Var, out: usize) -> Result<Var> {
    let g = ctx.graph();
    let mut branches = vec![ctx.basic_conv(&format!("{name}.branch0"), x, out, ConvSpec::same(1))?];
    for (i, k) in [3usize, 5, 7].into_iter().enumerate() {
        let p = format!("{name}.branch{}", i + 1);
        let y = ctx.basic_conv(&format!("{p}.0"), x, out, ConvSpec::same(1))?;
        let y = ctx.basic_conv(&format!("{p}.1"), &y, out, ConvSpec::rect(1, k))?;
        let y = ctx.basic_conv(&format!("{p}.2"), &y, out, ConvSpec::rect(k, 1))?;
        let y = ctx.basic_conv(&format!("{p}.3"), &y, out, ConvSpec::dilated(3, k))?;
        branches.push(y);
    }
    let refs: Vec<&Var> = branches.iter().collect();
    let cat = g.concat(&refs);
    let fused = ctx.basic_conv(&format!("{name}.cat"), &cat, out, ConvSpec::same(3))?;
    let shortcut = ctx.basic_conv(&format!("{name}.res"), x, out, ConvSpec::same(1))?;
    Ok(g.relu(&g.add(&fused, &shortcut)))
}

fn spatial(v: &Var) -> (usize, usize) {
    (v.shape()[2], v.shape()[3])
}

fn check_ratio(what: &str, fine: &Var, coarse: &Var, ratio: usize) -> Result<()> {
    let (fh, fw) = spatial(fine);
    let (ch, cw) = spatial(coarse);
    if fh != ch * ratio || fw != cw * ratio {
        return Err(Error::Contract(format!(
            "{what}: expected {ratio}x resolution ratio, got {fh}x{fw} vs {ch}x{cw}"
        )));
    }
    Ok(())
}

/// Attention-weighted residual refinement of three scales.
///
/// `x1`, `x2`, `x3` sit at strides `s`, `2s`, `4s`; `attn` is a one-channel
/// logit map at stride `4s`. Each output is `x + up(sigmoid(attn)) * x`.
pub fn refine(ctx: &Ctx, x1: &Var, x2: &Var, x3: &Var, attn: &Var) -> Result<(Var, Var, Var)> {
    let g = ctx.graph();
    if attn.shape()[1] != 1 {
        return Err(Error::Contract(format!("refine: attention map has {} channels", attn.shape()[1])));
    }
    check_ratio("refine x3/attn", x3, attn, 1)?;
    check_ratio("refine x2/attn", x2, attn, 2)?;
    check_ratio("refine x1/attn", x1, attn, 4)?;
    let a = g.sigmoid(attn);
    let y1 = g.add(x1, &g.mul(x1, &g.upsample(&a, 4)));
    let y2 = g.add(x2, &g.mul(x2, &g.upsample(&a, 2)));
    let y3 = g.add(x3, &g.mul(x3, &a));
    Ok((y1, y2, y3))
}

/// Cascaded partial decoder over strides `4s`, `2s`, `s`.
///
/// Returns a one-channel logit map at stride `s` when `emit_head` is set,
/// otherwise the `3 * C` channel aggregate.
pub fn aggregation(ctx: &Ctx, name: &str, deep: &Var, mid: &Var, shallow: &Var, emit_head: bool) -> Result<Var> {
    let g = ctx.graph();
    let c = deep.shape()[1];
    for (what, v) in [("mid", mid), ("shallow", shallow)] {
        if v.shape()[1] != c {
            return Err(Error::Config(format!(
                "aggregation {name}: {what} has {} channels, deep has {c}",
                v.shape()[1]
            )));
        }
    }
    check_ratio("aggregation mid/deep", mid, deep, 2)?;
    check_ratio("aggregation shallow/mid", shallow, mid, 2)?;
    let k3 = ConvSpec::same(3);

    let up_deep = g.upsample(deep, 2);
    let h2 = g.mul(&ctx.basic_conv(&format!("{name}.up1"), &up_deep, c, k3)?, mid);
    let a = ctx.basic_conv(&format!("{name}.up2"), &g.upsample(&up_deep, 2), c, k3)?;
    let b = ctx.basic_conv(&format!("{name}.up3"), &g.upsample(mid, 2), c, k3)?;
    let h3 = g.mul(&g.mul(&a, &b), shallow);
    let g2 = ctx.basic_conv(&format!("{name}.cat2"), &g.concat(&[&up_deep, &h2]), 2 * c, k3)?;
    let lifted = ctx.basic_conv(&format!("{name}.up4"), &g2, 2 * c, k3)?;
    let g3 = ctx.basic_conv(&format!("{name}.cat3"), &g.concat(&[&g.upsample(&lifted, 2), &h3]), 3 * c, k3)?;
    if !emit_head {
        return Ok(g3);
    }
    let y = ctx.basic_conv(&format!("{name}.conv4"), &g3, 3 * c, k3)?;
    ctx.conv(&format!("{name}.head"), &y, 1, k3, true)
}
