use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{self, BnMode, BnUpdate, Ctx};
use super::params::ModelParams;
use crate::autograd::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::Tensor;

/// Number of encoder levels.
pub const LEVELS: usize = 5;

/// Convolutions per encoder block (VGG-16 layout).
const BLOCK_DEPTH: [usize; LEVELS] = [2, 2, 3, 3, 3];

/// One encoder level for a batch: `[n, c, h, w]` plus its stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

/// Five encoder levels, shallow to deep, at strides 1, 2, 4, 8, 16.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

/// Per-level `|p1 - p2|` of two shape-identical pyramids.
pub fn fuse_bitemporal(p1: &FeaturePyramid, p2: &FeaturePyramid) -> Result<FeaturePyramid> {
    contract!(p1.levels.len() == p2.levels.len(), "pyramids have different depths");
    let levels = p1
        .levels
        .iter()
        .zip(&p2.levels)
        .map(|(a, b)| {
            contract!(
                a.data.shape() == b.data.shape() && a.stride == b.stride,
                "pyramid level mismatch: {:?}@{} vs {:?}@{}",
                a.data.shape(),
                a.stride,
                b.data.shape(),
                b.stride
            );
            let data = a.data.data().iter().zip(b.data.data()).map(|(x, y)| (x - y).abs()).collect();
            Ok(FeatureMap {
                data: Tensor::from_vec(a.data.shape(), data),
                stride: a.stride,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FeaturePyramid { levels })
}

/// Tape outputs of one forward pass.
pub struct ForwardOutput {
    /// Full-resolution change logits `[n, 1, h, w]`.
    pub logits: Var,
    /// Stride-4 coarse attention logits `[n, 1, h/4, w/4]`.
    pub coarse: Var,
}

/// Detached outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub coarse: Tensor,
}

/// The network definition. Parameters are held separately in
/// [`ModelParams`], so one `C2FNet` serves both student and teacher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct C2FNet {
    config: ModelConfig,
}

/// Spatial size used when materialising fresh parameters.
const INIT_SIZE: usize = 16;

impl C2FNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(C2FNet { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters: Kaiming-uniform convolutions, zero biases,
    /// batch-norm scale 1 / offset 0, running statistics 0 / 1.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        let graph = Graph::no_grad();
        let ctx = Ctx::for_init(&graph, ChaCha8Rng::seed_from_u64(seed));
        let dummy = graph.constant(Tensor::zeros(&[1, 3, INIT_SIZE, INIT_SIZE]));
        self.forward_ctx(&ctx, &dummy, &dummy)?;
        Ok(ctx.into_params(self.config).expect("init context"))
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.config() != &self.config {
            return Err(Error::Config(format!(
                "parameters built for {:?}, network is {:?}",
                params.config(),
                self.config
            )));
        }
        Ok(())
    }

    fn check_images(t1: &Tensor, t2: &Tensor) -> Result<()> {
        contract!(t1.rank() == 4 && t1.shape()[1] == 3, "expected [n, 3, h, w] images, got {:?}", t1.shape());
        contract!(t1.shape() == t2.shape(), "bi-temporal images differ in shape: {:?} vs {:?}", t1.shape(), t2.shape());
        let (_, _, h, w) = t1.dims4();
        contract!(h > 0 && w > 0 && h % 16 == 0 && w % 16 == 0, "image size {h}x{w} must be a positive multiple of 16");
        Ok(())
    }

    /// Differentiable forward over a caller-owned tape.
    ///
    /// In [`BnMode::Train`] the batch statistics seen by every batch-norm
    /// layer are available from `ctx.take_bn_updates()` afterwards.
    pub fn forward(&self, ctx: &Ctx, t1: &Var, t2: &Var) -> Result<ForwardOutput> {
        Self::check_images(t1.value(), t2.value())?;
        self.forward_ctx(ctx, t1, t2)
    }

    /// Convenience: runs a training-mode forward and returns the tape
    /// outputs with the batch-norm updates.
    pub fn forward_train<'g>(
        &self,
        graph: &'g Graph,
        params: &'g ModelParams,
        t1: &Tensor,
        t2: &Tensor,
    ) -> Result<(Ctx<'g>, ForwardOutput, Vec<BnUpdate>)> {
        self.check_params(params)?;
        let ctx = Ctx::new(graph, params, BnMode::Train);
        let out = self.forward(&ctx, &graph.constant(t1.clone()), &graph.constant(t2.clone()))?;
        let updates = ctx.take_bn_updates();
        Ok((ctx, out, updates))
    }

    /// Inference with running statistics and no tape.
    pub fn predict(&self, params: &ModelParams, t1: &Tensor, t2: &Tensor) -> Result<Prediction> {
        self.check_params(params)?;
        let graph = Graph::no_grad();
        let ctx = Ctx::new(&graph, params, BnMode::Eval);
        let out = self.forward(&ctx, &graph.constant(t1.clone()), &graph.constant(t2.clone()))?;
        Ok(Prediction {
            logits: out.logits.value().clone(),
            coarse: out.coarse.value().clone(),
        })
    }

    /// Encodes one batch of images with running statistics.
    pub fn encode(&self, params: &ModelParams, image: &Tensor) -> Result<FeaturePyramid> {
        self.check_params(params)?;
        Self::check_images(image, image)?;
        let graph = Graph::no_grad();
        let ctx = Ctx::new(&graph, params, BnMode::Eval);
        let levels = self.encode_var(&ctx, &graph.constant(image.clone()))?;
        Ok(FeaturePyramid {
            levels: levels
                .into_iter()
                .enumerate()
                .map(|(i, v)| FeatureMap {
                    data: v.value().clone(),
                    stride: 1 << i,
                })
                .collect(),
        })
    }

    fn encode_var(&self, ctx: &Ctx, image: &Var) -> Result<Vec<Var>> {
        let g = ctx.graph();
        let channels = self.config.encoder_channels();
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(LEVELS);
        for (b, (&ch, &depth)) in channels.iter().zip(&BLOCK_DEPTH).enumerate() {
            if b > 0 {
                x = g.max_pool2(&x);
            }
            for l in 0..depth {
                let name = format!("encoder.block{}.{l}", b + 1);
                let y = ctx.conv(&format!("{name}.conv"), &x, ch, ConvSpec::same(3), true)?;
                let y = ctx.batch_norm(&format!("{name}.bn"), &y)?;
                x = g.relu(&y);
            }
            levels.push(x.clone());
        }
        Ok(levels)
    }

    fn gcm_or_bypass(&self, ctx: &Ctx, name: &str, x: &Var, enabled: bool) -> Result<Var> {
        let cd = self.config.decoder_width;
        if enabled {
            layers::gcm(ctx, name, x, cd)
        } else {
            ctx.conv(&format!("{name}.bypass"), x, cd, ConvSpec::same(1), true)
        }
    }

    fn forward_ctx(&self, ctx: &Ctx, t1: &Var, t2: &Var) -> Result<ForwardOutput> {
        let g = ctx.graph();
        let toggles = self.config.toggles;
        let cd = self.config.decoder_width;

        let p1 = self.encode_var(ctx, t1)?;
        let p2 = self.encode_var(ctx, t2)?;
        let att: Vec<Var> = p1
            .iter()
            .zip(&p2)
            .enumerate()
            .map(|(i, (a, b))| {
                let fused = g.abs_diff(a, b);
                let name = format!("attention.level{}", i + 1);
                let y = layers::channel_attention(ctx, &format!("{name}.channel"), &fused)?;
                layers::spatial_attention(ctx, &format!("{name}.spatial"), &y)
            })
            .collect::<Result<_>>()?;

        // Coarse stage over strides 16, 8, 4.
        let a1 = self.gcm_or_bypass(ctx, "gcm_abc.a", &att[4], toggles.gcm_abc_enabled)?;
        let b1 = self.gcm_or_bypass(ctx, "gcm_abc.b", &att[3], toggles.gcm_abc_enabled)?;
        let c1 = self.gcm_or_bypass(ctx, "gcm_abc.c", &att[2], toggles.gcm_abc_enabled)?;
        let coarse = if toggles.agg_init_enabled {
            layers::aggregation(ctx, "agg_init", &a1, &b1, &c1, true)?
        } else {
            ctx.conv("agg_init.bypass", &c1, 1, ConvSpec::same(1), true)?
        };

        // Fine stage over strides 4, 2, 1.
        let (y1, y2, y3) = if toggles.refine_enabled {
            layers::refine(ctx, &att[0], &att[1], &c1, &coarse)?
        } else {
            (att[0].clone(), att[1].clone(), c1.clone())
        };
        let c2 = self.gcm_or_bypass(ctx, "gcm_cde.c", &y3, toggles.gcm_cde_enabled)?;
        let d2 = self.gcm_or_bypass(ctx, "gcm_cde.d", &y2, toggles.gcm_cde_enabled)?;
        let e2 = self.gcm_or_bypass(ctx, "gcm_cde.e", &y1, toggles.gcm_cde_enabled)?;
        let agg = if toggles.agg_final_enabled {
            layers::aggregation(ctx, "agg_final", &c2, &d2, &e2, false)?
        } else {
            let sum = g.add(&g.add(&g.upsample(&c2, 4), &g.upsample(&d2, 2)), &e2);
            ctx.conv("agg_final.bypass", &sum, 3 * cd, ConvSpec::same(1), true)?
        };
        let logits = ctx.conv("head", &agg, 1, ConvSpec::same(3), true)?;
        Ok(ForwardOutput { logits, coarse })
    }
}
