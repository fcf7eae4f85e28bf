use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use super::augment::{crop_resize, two_view};
use super::config::Config;
use super::data::Dataset;
use super::lars::{lars_step, LarsState};
use super::schedule::{lr_schedule, peak_lr, step_plan, StepPlan};
use crate::autodiff::Tape;
use crate::distill::{image_level_loss, multi_view_loss, EnqueueViews, MemoryQueue};
use crate::error::{Error, Result};
use crate::layers;
use crate::model::{
    norm_rescale_export, BnHyper, Checkpoint, CheckpointMeta, Ctx, Mode, ModelKind, ParamStore, StudentSpec, Teacher,
    TeacherSpec, TrainState, STATE_PREFIX,
};
use crate::rng::{tag, Rng};
use crate::tensor::Tensor;

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Mean per-pixel cosine between the student output and the teacher map.
    pub pixel_cosine: f64,
    pub lr: f64,
}

impl StepMetrics {
    /// `step<TAB>loss<TAB>pixel_cosine<TAB>lr`, floats in shortest round-trip form.
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.step, self.loss, self.pixel_cosine, self.lr)
    }
}

/// Image order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    Rng::stream(seed, tag::SAMPLING, &[epoch]).shuffle(&mut ids);
    ids
}

/// Images used at `step`.
pub fn batch_ids(n: usize, batch: usize, plan: &StepPlan, seed: u64, step: u64) -> Vec<usize> {
    let epoch = step / plan.steps_per_epoch;
    let pos = (step % plan.steps_per_epoch) as usize;
    epoch_order(n, seed, epoch)[pos * batch..(pos + 1) * batch].to_vec()
}

fn stack(views: &[Tensor]) -> Result<Tensor> {
    let mut shape = alloc::vec![views.len()];
    shape.extend_from_slice(views[0].shape());
    let mut data = Vec::with_capacity(views.len() * views[0].len());
    for v in views {
        data.extend_from_slice(v.data());
    }
    Tensor::new(&shape, data)
}

/// Augmented view batches `[N, 3, S, S]` for `step`: view a always, view b
/// when `two` is set. Each image's views depend only on (seed, image id, step).
pub fn make_views(data: &Dataset, ids: &[usize], cfg: &Config, step: u64, two: bool) -> Result<(Tensor, Option<Tensor>)> {
    let mut a = Vec::with_capacity(ids.len());
    let mut b = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut rng = Rng::stream(cfg.seed, tag::AUGMENT, &[id as u64, step]);
        let (va, vb) = two_view(&data.images[id], &cfg.augment, cfg.data.input_size, &mut rng)?;
        a.push(va);
        b.push(vb);
    }
    Ok((stack(&a)?, if two { Some(stack(&b)?) } else { None }))
}

/// Whole images resized to the training resolution.
pub fn center_batch(data: &Dataset, ids: &[usize], size: usize) -> Result<Tensor> {
    let views: Vec<Tensor> = ids
        .iter()
        .map(|&id| crop_resize(&data.images[id], 0.0, 0.0, data.size as f64, size))
        .collect::<Result<_>>()?;
    stack(&views)
}

/// Mean over pixels of cos(s, t), `t` resized to the spatial size of `s`.
pub fn pixel_cosine(s: &Tensor, t: &Tensor) -> Result<f64> {
    if s.rank() != 4 || t.rank() != 4 || s.shape()[..2] != t.shape()[..2] {
        return Err(Error::mismatch("pixel cosine", s.shape(), t.shape()));
    }
    let (n, c, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
    let t = if t.shape()[2..] != s.shape()[2..] {
        layers::resize_tensor(t, h, w)?
    } else {
        t.clone()
    };
    let (sd, td) = (s.data(), t.data());
    let hw = h * w;
    let mut total = 0.0;
    for i in 0..n {
        for p in 0..hw {
            let (mut st, mut ss, mut tt) = (0.0f64, 0.0f64, 0.0f64);
            for ch in 0..c {
                let k = (i * c + ch) * hw + p;
                let (a, b) = (sd[k] as f64, td[k] as f64);
                st += a * b;
                ss += a * a;
                tt += b * b;
            }
            total += st / (Float::sqrt(ss).max(layers::L2_EPS) * Float::sqrt(tt).max(layers::L2_EPS));
        }
    }
    Ok(total / (n * hw) as f64)
}

fn row_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.shape()[1];
    let rows = a.data().chunks(d).zip(b.data().chunks(d));
    let n = a.shape()[0] as f64;
    rows.map(|(x, y)| {
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx = Float::sqrt(x.iter().map(|&p| p as f64 * p as f64).sum::<f64>()).max(layers::L2_EPS);
        let ny = Float::sqrt(y.iter().map(|&p| p as f64 * p as f64).sum::<f64>()).max(layers::L2_EPS);
        dot / (nx * ny)
    })
    .sum::<f64>()
        / n
}

fn check_finite(loss: f64, what: &str, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            step: step as usize,
        })
    }
}

fn plan_for(cfg: &Config, data: &Dataset, optim: &super::config::OptimConfig) -> Result<StepPlan> {
    cfg.validate()?;
    data.validate()?;
    step_plan(data.len(), optim.batch_size, optim.epochs, optim.warmup_epochs, optim.max_steps)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// Train the teacher backbone and vector head with image-level InfoNCE between
/// the two views, negatives from the queue. The key side of each pair is the
/// same network's output on the other view, detached.
pub fn pretrain_teacher(cfg: &Config, data: &Dataset, on_step: &mut dyn FnMut(&StepMetrics)) -> Result<PretrainOutput> {
    let optim = cfg.pretrain.optim;
    let plan = plan_for(cfg, data, &optim)?;
    let spec: &TeacherSpec = &cfg.teacher;
    let bn = BnHyper::default();
    let mut store = spec.init(&mut Rng::stream(cfg.seed, tag::INIT, &[0]))?;
    let mut meta = CheckpointMeta::new(ModelKind::Teacher, spec.backbone.clone(), bn);
    meta.head_kind = Some(crate::adaptor::InputKind::Vector);
    meta.head_layers = TeacherSpec::head_layers();
    meta.seed_lineage = alloc::vec![cfg.seed];
    let mut metrics = Vec::new();
    if cfg.pretrain.frozen_random {
        return Ok(PretrainOutput {
            checkpoint: Checkpoint::from_store(meta, &store),
            metrics,
        });
    }

    let mut queue = MemoryQueue::new(cfg.queue.capacity, spec.head_dim)?;
    if cfg.queue.prefill {
        for ids in prefill_ids(data.len(), cfg).chunks(optim.batch_size) {
            let x = center_batch(data, ids, cfg.data.input_size)?;
            let mut tape = Tape::<f32>::new();
            let mut ctx = Ctx::new(&store, Mode::Frozen, bn);
            let xv = tape.constant(x);
            let (_, v) = spec.forward(&mut ctx, &mut tape, xv)?;
            queue.push_rows(tape.value(v))?;
        }
    }

    let peak = peak_lr(optim.base_lr, optim.batch_size);
    let lars = optim.lars();
    let mut state = LarsState::default();
    for step in 0..plan.total {
        let ids = batch_ids(data.len(), optim.batch_size, &plan, cfg.seed, step);
        let (xa, xb) = make_views(data, &ids, cfg, step, true)?;
        let xb = xb.expect("two views");
        let negs = queue.snapshot();
        let mut tape = Tape::<f32>::new();
        let mut ctx = Ctx::new(&store, Mode::Train, bn);
        let (xa, xb) = (tape.constant(xa), tape.constant(xb));
        let (_, qa) = spec.forward(&mut ctx, &mut tape, xa)?;
        let (_, qb) = spec.forward(&mut ctx, &mut tape, xb)?;
        let lab = image_level_loss(&mut tape, qa, qb, negs.as_ref(), cfg.pretrain.tau)?;
        let lba = image_level_loss(&mut tape, qb, qa, negs.as_ref(), cfg.pretrain.tau)?;
        let sum = tape.add(lab, lba)?;
        let loss = tape.scale(sum, 0.5)?;
        let loss_value = tape.value(loss).item() as f64;
        check_finite(loss_value, "pretrain loss", step)?;
        tape.backward(loss)?;
        let grads = ctx.grads(&tape);
        let updates = ctx.take_bn_updates();
        let (ka, kb) = (tape.value(qa).clone(), tape.value(qb).clone());
        drop(ctx);
        let lr = lr_schedule(step, plan.total, plan.warmup, peak)?;
        state.step = step as usize;
        lars_step(&mut store, &grads, &mut state, lr, &lars)?;
        store.apply_bn_updates(&updates, bn.momentum)?;
        queue.push_rows(&kb)?;
        queue.push_rows(&ka)?;
        let m = StepMetrics {
            step,
            loss: loss_value,
            pixel_cosine: row_cosine(&ka, &kb),
            lr,
        };
        on_step(&m);
        metrics.push(m);
    }
    Ok(PretrainOutput {
        checkpoint: Checkpoint::from_store(meta, &store),
        metrics,
    })
}

fn prefill_ids(n: usize, cfg: &Config) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    Rng::stream(cfg.seed, tag::QUEUE, &[]).shuffle(&mut ids);
    ids.truncate(cfg.queue.capacity.min(n));
    ids
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    /// Student parameters with heads, optimizer momentum and queue, unscaled.
    pub raw: Checkpoint,
    /// Backbone-only export; absent when the run stopped early.
    pub export: Option<Checkpoint>,
    pub metrics: Vec<StepMetrics>,
    /// Whether the schedule ran to its last step.
    pub completed: bool,
}

const MOMENTUM_PREFIX: &str = "state.momentum.";
const QUEUE_PATH: &str = "state.queue";

/// Options beyond the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct DistillOptions<'a> {
    /// Raw checkpoint of an interrupted run to continue.
    pub resume: Option<&'a Checkpoint>,
    /// Stop once this many total steps have run.
    pub stop_after: Option<u64>,
}

/// Pixel-wise contrastive distillation from a frozen teacher into the student.
pub fn distill(
    cfg: &Config,
    data: &Dataset,
    teacher: &Teacher,
    opts: DistillOptions<'_>,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<DistillOutput> {
    let optim = cfg.optim;
    let plan = plan_for(cfg, data, &optim)?;
    let spec: &StudentSpec = &cfg.student;
    let dim = spec.out_dim();
    if teacher.out_dim() != dim {
        return Err(Error::mismatch("teacher/student feature dim", &[teacher.out_dim()], &[dim]));
    }
    let bn = BnHyper::default();
    let lars = optim.lars();
    let mut state = LarsState::default();
    let (mut store, mut queue, start) = match opts.resume {
        Some(ckpt) => restore(ckpt, cfg, &plan, &mut state)?,
        None => {
            let store = spec.init(&mut Rng::stream(cfg.seed, tag::INIT, &[1]))?;
            let mut queue = MemoryQueue::new(cfg.queue.capacity, dim)?;
            if cfg.queue.prefill {
                for ids in prefill_ids(data.len(), cfg).chunks(optim.batch_size) {
                    queue.push_maps(&teacher.forward(&center_batch(data, ids, cfg.data.input_size)?)?)?;
                }
            }
            (store, queue, 0)
        }
    };

    let symmetric = cfg.loss.symmetric;
    let peak = peak_lr(optim.base_lr, optim.batch_size);
    let end = opts.stop_after.map_or(plan.total, |s| s.min(plan.total));
    let mut metrics = Vec::new();
    for step in start..end {
        let ids = batch_ids(data.len(), optim.batch_size, &plan, cfg.seed, step);
        let (xa, xb) = make_views(data, &ids, cfg, step, symmetric)?;
        let mut inputs = alloc::vec![xa];
        inputs.extend(xb);
        let targets: Vec<Tensor> = inputs.iter().map(|x| teacher.forward(x)).collect::<Result<_>>()?;
        let negs = queue.snapshot();

        let mut tape = Tape::<f32>::new();
        let mut ctx = Ctx::new(&store, Mode::Train, bn);
        let mut pairs = Vec::with_capacity(inputs.len());
        for (x, t) in inputs.iter().zip(&targets) {
            let xv = tape.constant(x.clone());
            let out = spec.forward(&mut ctx, &mut tape, xv)?;
            let tv = tape.constant(t.clone());
            pairs.push((out.s_star, tv));
        }
        let loss = multi_view_loss(&mut tape, &pairs, negs.as_ref(), &cfg.loss)?;
        let loss_value = tape.value(loss).item() as f64;
        check_finite(loss_value, "distillation loss", step)?;
        tape.backward(loss)?;
        let grads = ctx.grads(&tape);
        let updates = ctx.take_bn_updates();
        let mut cos = 0.0;
        for &(s, t) in &pairs {
            cos += pixel_cosine(tape.value(s), tape.value(t))?;
        }
        drop(ctx);

        let lr = lr_schedule(step, plan.total, plan.warmup, peak)?;
        state.step = step as usize;
        lars_step(&mut store, &grads, &mut state, lr, &lars)?;
        store.apply_bn_updates(&updates, bn.momentum)?;
        queue.push_maps(&targets[0])?;
        if targets.len() > 1 && cfg.loss.enqueue == EnqueueViews::Both {
            queue.push_maps(&targets[1])?;
        }
        let m = StepMetrics {
            step,
            loss: loss_value,
            pixel_cosine: cos / pairs.len() as f64,
            lr,
        };
        on_step(&m);
        metrics.push(m);
    }

    let completed = end == plan.total;
    let mut meta = CheckpointMeta::new(ModelKind::Student, spec.backbone.clone(), bn);
    meta.student = Some(spec.clone());
    meta.seed_lineage = alloc::vec![cfg.seed];
    let export = if completed {
        let anchor = if cfg.export.norm_rescale { cfg.export.anchor } else { 1.0 };
        Some(norm_rescale_export(&store, &meta, anchor)?)
    } else {
        None
    };
    meta.train_state = Some(TrainState {
        step: end,
        total_steps: plan.total,
        queue_head: queue.len() % queue.capacity().max(1),
        queue_len: queue.len(),
    });
    let mut raw = Checkpoint::from_store(meta, &store);
    for (path, m) in &state.momentum {
        raw.push(format!("{MOMENTUM_PREFIX}{path}"), m.clone())?;
    }
    if let Some(q) = queue.snapshot() {
        raw.push(QUEUE_PATH, q)?;
    }
    Ok(DistillOutput {
        raw,
        export,
        metrics,
        completed,
    })
}

fn restore(ckpt: &Checkpoint, cfg: &Config, plan: &StepPlan, state: &mut LarsState) -> Result<(ParamStore, MemoryQueue, u64)> {
    let meta = &ckpt.meta;
    if meta.model_kind != ModelKind::Student || meta.student.as_ref() != Some(&cfg.student) {
        return Err(Error::Config {
            path: "student".into(),
            reason: "resume checkpoint was not produced by this student configuration".into(),
        });
    }
    let ts = meta.train_state.ok_or(Error::MissingParam("train_state".into()))?;
    if ts.total_steps != plan.total {
        return Err(Error::Config {
            path: "optim".into(),
            reason: format!("resume checkpoint has a {}-step schedule, config gives {}", ts.total_steps, plan.total),
        });
    }
    let store = ckpt.to_store()?;
    let mut momentum = BTreeMap::new();
    for e in &ckpt.entries {
        if let Some(path) = e.path.strip_prefix(MOMENTUM_PREFIX) {
            momentum.insert(path.into(), e.tensor.clone());
        } else if e.path.starts_with(STATE_PREFIX) && e.path != QUEUE_PATH {
            return Err(Error::arg(format!("unknown training state entry `{}`", e.path)));
        }
    }
    state.momentum = momentum;
    let queue = MemoryQueue::restore(cfg.queue.capacity, cfg.student.out_dim(), ckpt.get(QUEUE_PATH))?;
    if queue.len() != ts.queue_len {
        return Err(Error::arg("queue length in checkpoint metadata does not match its contents"));
    }
    Ok((store, queue, ts.step))
}

/// Mean pixel cosine between the student output and the teacher map on fixed
/// images, both networks with running BN statistics.
pub fn eval_pixel_cosine(spec: &StudentSpec, store: &ParamStore, teacher: &Teacher, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let mut ctx = Ctx::new(store, Mode::Frozen, BnHyper::default());
    let xv = tape.constant(x.clone());
    let out = spec.forward(&mut ctx, &mut tape, xv)?;
    pixel_cosine(tape.value(out.s_star), &teacher.forward(x)?)
}
