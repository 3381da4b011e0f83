//! The training loops.
//!
//! Three independent random streams keep runs comparable: the labelled
//! batch order, the unlabelled batch order and the perturbations. A
//! semi-supervised run therefore draws exactly the same labelled batches as
//! a supervised run with the same seed.

use std::cell::Cell;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::evaluate;
use super::loss::{bce_with_logits_value, soft_targets};
use super::perturb::{flip_batch, make_views};
use super::{select_best, AdamW, EmaState, EpochLog, LossBreakdown, Phase, TrainConfig};
use crate::autograd::Graph;
use crate::data::{collate, BiTemporalSample};
use crate::error::{Error, Result};
use crate::kernels::pool::max_pool2;
use crate::metrics::{binarize, compute_metrics, confusion, BinaryMask, ConfusionCounts, MetricSet};
use crate::model::{BnMode, C2FNet, Ctx, ModelParams};
use crate::tensor::Tensor;

const LABELLED_STREAM: u64 = 1;
const UNLABELLED_STREAM: u64 = 2;
const PERTURB_STREAM: u64 = 3;

pub struct TrainData<'a> {
    pub labelled: &'a [BiTemporalSample],
    pub unlabelled: &'a [BiTemporalSample],
    pub val: &'a [BiTemporalSample],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    Semi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Student,
    Teacher,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Student => "student",
            ModelKind::Teacher => "teacher",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
    pub labelled_ids: Vec<String>,
    pub unlabelled_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValRecord {
    pub epoch: usize,
    pub model: ModelKind,
    pub metrics: MetricSet,
}

/// A snapshot chosen by [`select_best`].
#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    pub epoch: usize,
    pub model: ModelKind,
    pub metrics: MetricSet,
    pub params: ModelParams,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub student: ModelParams,
    pub ema: Option<EmaState>,
    pub logs: Vec<EpochLog>,
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValRecord>,
    pub best_student: Option<Best>,
    pub best_teacher: Option<Best>,
}

impl RunOutcome {
    /// The better of the best student and best teacher (student on ties).
    pub fn best(&self) -> Option<&Best> {
        let cands: Vec<&Best> = self.best_student.iter().chain(&self.best_teacher).collect();
        let metrics: Vec<MetricSet> = cands.iter().map(|b| b.metrics).collect();
        select_best(&metrics).ok().map(|i| cands[i])
    }
}

/// Endless shuffled passes over `0..len`, reshuffled at each pass.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(len: usize, batch: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        BatchStream {
            order: (0..len).collect(),
            pos: len,
            batch,
            rng,
        }
    }

    fn steps_per_pass(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    /// Next batch; the last one of a pass may be short.
    fn next(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

struct Session<'a> {
    net: C2FNet,
    cfg: &'a TrainConfig,
    data: &'a TrainData<'a>,
    student: ModelParams,
    opt: AdamW,
    ema: Option<EmaState>,
    labelled: BatchStream,
    unlabelled: BatchStream,
    perturb_rng: ChaCha8Rng,
    steps: Vec<StepRecord>,
    /// Labelled-batch predictions of the current epoch, as seen in training.
    train_counts: Cell<ConfusionCounts>,
}

fn train_confusion(logits: &Tensor, y: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    let (n, _, h, w) = logits.dims4();
    let mut total = ConfusionCounts::default();
    for i in 0..n {
        let range = i * h * w..(i + 1) * h * w;
        let pred = binarize(&logits.data()[range.clone()], h, w, threshold)?;
        let gt = BinaryMask::new(h, w, y.data()[range].iter().map(|&v| u8::from(v > 0.5)).collect())?;
        total += confusion(&pred, &gt)?;
    }
    Ok(total)
}

fn pick<'s>(pool: &'s [BiTemporalSample], idx: &[usize]) -> Vec<&'s BiTemporalSample> {
    idx.iter().map(|&i| &pool[i]).collect()
}

fn ids(batch: &[&BiTemporalSample]) -> Vec<String> {
    batch.iter().map(|s| s.id.clone()).collect()
}

/// Max-pools a mask batch down by `factor` (a power of two).
fn downsample_mask(mask: &Tensor, factor: usize) -> Tensor {
    let mut m = mask.clone();
    let mut f = factor;
    while f > 1 {
        m = max_pool2(&m).0;
        f /= 2;
    }
    m
}

impl<'a> Session<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a TrainData<'a>, init: Option<ModelParams>) -> Result<Self> {
        cfg.validate()?;
        if data.labelled.is_empty() {
            return Err(Error::Config("the labelled set is empty".into()));
        }
        let net = C2FNet::new(cfg.model_config())?;
        let student = match init {
            Some(p) => {
                if p.config() != net.config() {
                    return Err(Error::Config(format!(
                        "initial parameters built for {:?}, config asks for {:?}",
                        p.config(),
                        net.config()
                    )));
                }
                p
            }
            None => net.init_params(cfg.seed)?,
        };
        let mut perturb_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        perturb_rng.set_stream(PERTURB_STREAM);
        Ok(Session {
            net,
            cfg,
            data,
            student,
            opt: AdamW::new(cfg.learning_rate as f32, cfg.weight_decay as f32),
            ema: None,
            labelled: BatchStream::new(data.labelled.len(), cfg.batch_size, cfg.seed, LABELLED_STREAM),
            unlabelled: BatchStream::new(data.unlabelled.len(), cfg.batch_size, cfg.seed, UNLABELLED_STREAM),
            perturb_rng,
            steps: Vec::new(),
            train_counts: Cell::new(ConfusionCounts::default()),
        })
    }

    fn steps_per_epoch(&self) -> usize {
        // An epoch is one pass over the labelled stream in every phase, so
        // supervised and semi-supervised runs take the same optimiser steps
        // on the same labelled batches; the unlabelled stream just continues.
        self.cfg.steps_per_epoch.unwrap_or(self.labelled.steps_per_pass())
    }

    fn check_finite(&self, loss: &LossBreakdown, epoch: usize, batch: &[String], extra: &[String]) -> Result<()> {
        if loss.total.is_finite() && loss.sup.is_finite() && loss.con.is_finite() {
            return Ok(());
        }
        Err(Error::Numeric(format!(
            "non-finite loss (sup {}, con {}) at epoch {epoch}, step {}; batch ids: {:?}",
            loss.sup,
            loss.con,
            self.steps.len(),
            batch.iter().chain(extra).collect::<Vec<_>>()
        )))
    }

    /// One labelled batch through a training-mode forward on `ctx`; returns
    /// the loss node, its value and the batch-norm updates it produced.
    fn supervised_term(
        &self,
        graph: &Graph,
        ctx: &Ctx,
        batch: &[&BiTemporalSample],
    ) -> Result<(crate::autograd::Var, f64, Vec<crate::model::BnUpdate>)> {
        let (t1, t2, y) = collate(batch)?;
        let y = y.ok_or_else(|| Error::Data(format!("labelled batch {:?} lacks masks", ids(batch))))?;
        let out = self.net.forward(ctx, &graph.constant(t1), &graph.constant(t2))?;
        let updates = ctx.take_bn_updates();
        self.train_counts.set(self.train_counts.get() + train_confusion(out.logits.value(), &y, self.cfg.binarize_threshold)?);
        let mut loss = graph.bce_with_logits(&out.logits, &y);
        let mut value = bce_with_logits_value(out.logits.value().data(), y.data());
        if self.cfg.supervise_coarse {
            let yc = downsample_mask(&y, y.shape()[2] / out.coarse.shape()[2]);
            loss = graph.add(&loss, &graph.bce_with_logits(&out.coarse, &yc));
            value += bce_with_logits_value(out.coarse.value().data(), yc.data());
        }
        Ok((loss, value, updates))
    }

    fn apply(&mut self, grads: &std::collections::BTreeMap<String, Tensor>, updates: &[crate::model::BnUpdate]) -> Result<()> {
        self.opt.step(&mut self.student, grads)?;
        self.student.apply_bn_updates(updates)
    }

    fn supervised_step(&mut self, epoch: usize, phase: Phase) -> Result<()> {
        let idx = self.labelled.next();
        let batch = pick(self.data.labelled, &idx);
        let graph = Graph::new();
        let (grads, updates, sup) = {
            let ctx = Ctx::new(&graph, &self.student, BnMode::Train);
            let (loss, sup, updates) = self.supervised_term(&graph, &ctx, &batch)?;
            let mut g = graph.backward(&loss);
            (ctx.param_grads(&mut g), updates, sup)
        };
        let loss = LossBreakdown::new(sup, 0.0, self.cfg.beta);
        let labelled_ids = ids(&batch);
        self.check_finite(&loss, epoch, &labelled_ids, &[])?;
        self.apply(&grads, &updates)?;
        self.steps.push(StepRecord {
            epoch,
            phase,
            loss,
            labelled_ids,
            unlabelled_ids: Vec::new(),
        });
        Ok(())
    }

    fn semi_step(&mut self, epoch: usize) -> Result<()> {
        let lab = pick(self.data.labelled, &self.labelled.next());
        let unl = pick(self.data.unlabelled, &self.unlabelled.next());
        let (u1, u2, _) = collate(&unl)?;
        let views = make_views(&self.cfg.perturbation, &u1, &u2, &mut self.perturb_rng);
        let teacher = &self.ema.as_ref().expect("teacher exists in the semi phase").teacher;
        let teacher_logits = self.net.predict(teacher, &views.teacher.0, &views.teacher.1)?.logits;
        let target = soft_targets(&flip_batch(&teacher_logits, &views.flips));

        let graph = Graph::new();
        let (grads, updates, sup, con) = {
            let ctx = Ctx::new(&graph, &self.student, BnMode::Train);
            // Running statistics follow the labelled forward only, so the
            // supervised trajectory is untouched by the unlabelled stream.
            let (sup_node, sup, updates) = self.supervised_term(&graph, &ctx, &lab)?;
            let (s1, s2) = views.student;
            let out = self.net.forward(&ctx, &graph.constant(s1), &graph.constant(s2))?;
            ctx.take_bn_updates();
            let con_node = graph.bce_with_logits(&out.logits, &target);
            let con = bce_with_logits_value(out.logits.value().data(), target.data());
            let total = graph.add(&sup_node, &graph.scale(&con_node, self.cfg.beta as f32));
            let mut g = graph.backward(&total);
            (ctx.param_grads(&mut g), updates, sup, con)
        };
        let loss = LossBreakdown::new(sup, con, self.cfg.beta);
        let (labelled_ids, unlabelled_ids) = (ids(&lab), ids(&unl));
        self.check_finite(&loss, epoch, &labelled_ids, &unlabelled_ids)?;
        self.apply(&grads, &updates)?;
        self.ema.as_mut().expect("teacher exists").update(&self.student)?;
        self.steps.push(StepRecord {
            epoch,
            phase: Phase::Semi,
            loss,
            labelled_ids,
            unlabelled_ids,
        });
        Ok(())
    }

    fn validate(&self, params: &ModelParams) -> Result<Option<MetricSet>> {
        if self.data.val.is_empty() {
            return Ok(None);
        }
        let ev = evaluate(&self.net, params, self.data.val, self.cfg.batch_size, self.cfg.binarize_threshold)?;
        Ok(Some(ev.metrics()?))
    }
}

fn keep_best(slot: &mut Option<Best>, epoch: usize, model: ModelKind, metrics: MetricSet, params: &ModelParams) {
    let better = match slot {
        None => true,
        Some(b) => select_best(&[b.metrics, metrics]).expect("two entries") == 1,
    };
    if better {
        *slot = Some(Best {
            epoch,
            model,
            metrics,
            params: params.clone(),
        });
    }
}

/// Runs `total_epochs` of training. In semi mode the first `warmup_epochs`
/// are supervised, then the teacher is copied from the student and every
/// step pairs one labelled with one unlabelled batch. Student (and teacher)
/// are validated after every epoch when a validation set is given.
pub fn run_training(
    cfg: &TrainConfig,
    data: &TrainData,
    mode: Mode,
    init: Option<ModelParams>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<RunOutcome> {
    if mode == Mode::Semi && data.unlabelled.is_empty() {
        return Err(Error::Config(
            "the unlabelled set is empty; use supervised mode instead".into(),
        ));
    }
    let mut s = Session::new(cfg, data, init)?;
    let mut logs = Vec::with_capacity(cfg.total_epochs);
    let mut validation = Vec::new();
    let (mut best_student, mut best_teacher) = (None, None);

    for epoch in 0..cfg.total_epochs {
        let started = Instant::now();
        let phase = match mode {
            Mode::Supervised => Phase::Supervised,
            Mode::Semi if epoch < cfg.warmup_epochs => Phase::Warmup,
            Mode::Semi => Phase::Semi,
        };
        if phase == Phase::Semi && s.ema.is_none() {
            s.ema = Some(EmaState::new(&s.student, cfg.alpha)?);
        }
        let first = s.steps.len();
        s.train_counts.take();
        for _ in 0..s.steps_per_epoch() {
            match phase {
                Phase::Semi => s.semi_step(epoch)?,
                _ => s.supervised_step(epoch, phase)?,
            }
        }
        let taken = &s.steps[first..];
        let mean = |f: fn(&LossBreakdown) -> f64| taken.iter().map(|r| f(&r.loss)).sum::<f64>() / taken.len() as f64;

        let val_student = s.validate(&s.student)?;
        let val_teacher = match &s.ema {
            Some(e) => s.validate(&e.teacher)?,
            None => None,
        };
        if let Some(m) = val_student {
            validation.push(ValRecord { epoch, model: ModelKind::Student, metrics: m });
            keep_best(&mut best_student, epoch, ModelKind::Student, m, &s.student);
        }
        if let (Some(m), Some(e)) = (val_teacher, &s.ema) {
            validation.push(ValRecord { epoch, model: ModelKind::Teacher, metrics: m });
            keep_best(&mut best_teacher, epoch, ModelKind::Teacher, m, &e.teacher);
        }
        let log = EpochLog {
            epoch,
            phase,
            loss_sup: mean(|l| l.sup),
            loss_con: mean(|l| l.con),
            loss_total: mean(|l| l.total),
            train: compute_metrics(&s.train_counts.take())?,
            val_student,
            val_teacher,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} {}: loss {:.5} (sup {:.5}, con {:.5}), val F1 {}",
            phase.as_str(),
            log.loss_total,
            log.loss_sup,
            log.loss_con,
            log.val_best().map_or("-".into(), |m| format!("{:.4}", m.f1))
        );
        on_epoch(&log);
        logs.push(log);
    }
    if mode == Mode::Semi && s.ema.is_none() {
        s.ema = Some(EmaState::new(&s.student, cfg.alpha)?);
    }
    Ok(RunOutcome {
        student: s.student,
        ema: s.ema,
        logs,
        steps: s.steps,
        validation,
        best_student,
        best_teacher,
    })
}

/// `warmup_epochs` of plain supervised training from `params`.
pub fn train_supervised(
    params: ModelParams,
    labelled: &[BiTemporalSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    let cfg = TrainConfig {
        total_epochs: cfg.warmup_epochs,
        ..cfg.clone()
    };
    let data = TrainData {
        labelled,
        unlabelled: &[],
        val: &[],
    };
    let out = run_training(&cfg, &data, Mode::Supervised, Some(params), &mut |_| {})?;
    Ok((out.student, out.logs))
}

/// Warmup followed by mean-teacher training; returns the final student,
/// teacher and per-epoch logs.
pub fn train_semi(
    params: ModelParams,
    labelled: &[BiTemporalSample],
    unlabelled: &[BiTemporalSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, ModelParams, Vec<EpochLog>)> {
    let data = TrainData {
        labelled,
        unlabelled,
        val: &[],
    };
    let out = run_training(cfg, &data, Mode::Semi, Some(params), &mut |_| {})?;
    let teacher = out.ema.expect("semi runs end with a teacher").teacher;
    Ok((out.student, teacher, out.logs))
}
