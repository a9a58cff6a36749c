//! Joint optimisation of both streams: batch forward, composite loss,
//! backward through the cross-stream paths, SGD with momentum, a step
//! learning-rate schedule, validation-based early stopping and checkpoints.

mod checkpoint;
mod config;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcsError, Result};
use crate::evalharness::{evaluate, EvalReport};
use crate::extractor::{segment_offsets, take_snippets};
use crate::losses::{cross_entropy, discrim_embed, total_loss, triplet_inter, LossBreakdown};
use crate::model::{BoundModel, Forward, Model};
use crate::numeric::{Graph, Tensor, Var};
use crate::sampler::{epoch_plan, Batch, LabelIndex};
use crate::seed;
use crate::synthdata::{Dataset, Instance};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelDims, TrainConfig};

/// `lr0` before the decay epoch, `lr0·factor` from it on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_decay_epoch {
        cfg.lr0
    } else {
        cfg.lr0 * cfg.lr_decay_factor
    }
}

/// `v ← μv − lr·(g + wd·θ)`, `θ ← θ + v`, elementwise.
pub fn sgd_update(
    theta: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    wd: f64,
) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * (g + wd * *t);
        *t += *v;
    }
}

/// Biases are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !name.rsplit('.').next().unwrap_or(name).starts_with('b')
}

/// Frames and labels of one batch, already cut to training length.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInputs {
    pub frames_f: Vec<Tensor>,
    pub frames_o: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl BatchInputs {
    /// Cuts the same random snippets from both views of every instance.
    pub fn sample<R: Rng + ?Sized>(
        pool: &[&Instance],
        batch: &Batch,
        segments: usize,
        snippet: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut frames_f = Vec::with_capacity(batch.instances());
        let mut frames_o = Vec::with_capacity(batch.instances());
        for &p in &batch.positions {
            let inst = pool[p];
            let offs = segment_offsets(inst.frames_f.rows(), segments, snippet, rng)?;
            frames_f.push(take_snippets(&inst.frames_f, &offs, snippet));
            frames_o.push(take_snippets(&inst.frames_o, &offs, snippet));
        }
        Ok(BatchInputs {
            frames_f,
            frames_o,
            labels: batch.labels.clone(),
        })
    }
}

/// Graph nodes of the composite objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub forward: Forward,
    pub l1: Option<Var>,
    pub l2: Option<Var>,
    pub l3: Var,
    pub l3_f: Var,
    pub l3_o: Var,
    pub total: Var,
}

impl Objective {
    pub fn breakdown(&self, g: &Graph, cfg: &TrainConfig) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let (lambda1, lambda2) = cfg.effective_lambdas();
        let mut b = total_loss(
            val(self.l1),
            val(self.l2),
            g.value(self.l3).item(),
            lambda1,
            lambda2,
        );
        b.total = g.value(self.total).item();
        b
    }

    /// Name of the first non-finite intermediate, in forward order.
    pub fn first_non_finite(&self, g: &Graph) -> Option<String> {
        let f = &self.forward;
        let mut named: Vec<(String, Var)> = Vec::new();
        for (i, (&a, &b)) in f.xf.iter().zip(&f.xo).enumerate() {
            named.push((format!("xf'[{i}]"), a));
            named.push((format!("xo'[{i}]"), b));
        }
        named.extend([
            ("emb_f".to_string(), f.emb_f),
            ("emb_o".to_string(), f.emb_o),
            ("logits_f".to_string(), f.logits_f),
            ("logits_o".to_string(), f.logits_o),
        ]);
        if let Some(v) = self.l1 {
            named.push(("l1".into(), v));
        }
        if let Some(v) = self.l2 {
            named.push(("l2".into(), v));
        }
        named.push(("l3".into(), self.l3));
        named.push(("total".into(), self.total));
        named
            .into_iter()
            .find(|(_, v)| !g.value(*v).is_finite())
            .map(|(n, _)| n)
    }
}

/// Builds `λ1·l1 + λ2·l2 + l3` for one batch. `l1` and `l2` are left out of
/// the graph when ranking losses are off or their weight is zero.
pub fn objective(
    g: &mut Graph,
    model: &Model,
    bound: &BoundModel,
    inputs: &BatchInputs,
    cfg: &TrainConfig,
) -> Result<Objective> {
    let ff: Vec<&Tensor> = inputs.frames_f.iter().collect();
    let fo: Vec<&Tensor> = inputs.frames_o.iter().collect();
    let forward = model.forward(g, bound, &ff, &fo)?;
    let labels = &inputs.labels;
    let (lambda1, lambda2) = cfg.effective_lambdas();

    let l3_f = cross_entropy(g, forward.logits_f, labels)?;
    let l3_o = cross_entropy(g, forward.logits_o, labels)?;
    let l3_sum = g.add(l3_f, l3_o)?;
    let l3 = g.scale(l3_sum, 0.5);
    let mut total = l3;

    let l1 = if lambda1 != 0.0 {
        let v = triplet_inter(
            g,
            forward.emb_f,
            forward.emb_o,
            labels,
            cfg.margins.alpha1,
            cfg.positive_mining,
        )?;
        let w = g.scale(v, lambda1);
        total = g.add(total, w)?;
        Some(v)
    } else {
        None
    };
    let l2 = if lambda2 != 0.0 {
        let v = discrim_embed(
            g,
            forward.emb_f,
            labels,
            forward.emb_o,
            labels,
            cfg.margins.alpha2,
            cfg.margins.alpha3,
        )?;
        let w = g.scale(v, lambda2);
        total = g.add(total, w)?;
        Some(v)
    } else {
        None
    };
    Ok(Objective {
        forward,
        l1,
        l2,
        l3,
        l3_f,
        l3_o,
        total,
    })
}

/// Momentum buffers, one per model tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &Model) -> Self {
        Sgd {
            velocity: model
                .tensors()
                .into_iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        let names = model.names();
        for (((theta, v), g), name) in model
            .tensors_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(grads)
            .zip(&names)
        {
            let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
            sgd_update(
                theta.data_mut(),
                v.data_mut(),
                g.data(),
                lr,
                cfg.momentum,
                wd,
            );
        }
    }
}

/// One forward, backward and update.
pub fn train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    inputs: &BatchInputs,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let obj = objective(&mut g, model, &bound, inputs, cfg)?;
    if let Some(name) = obj.first_non_finite(&g) {
        return Err(CcsError::NonFinite(format!(
            "first non-finite tensor in the forward pass: {name}"
        )));
    }
    g.backward(obj.total)?;
    let grads: Vec<Tensor> = bound.vars().iter().map(|&v| g.grad_or_zeros(v)).collect();
    let names = model.names();
    if let Some((name, _)) = names.iter().zip(&grads).find(|(_, t)| !t.is_finite()) {
        return Err(CcsError::NonFinite(format!("gradient of {name}")));
    }
    let breakdown = obj.breakdown(&g, cfg);
    sgd.step(model, &grads, lr, cfg);
    Ok(breakdown)
}

/// One row of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub acc_f: f64,
    pub acc_o: f64,
    pub acc_fused: f64,
    pub lr: f64,
}

/// Writes the metric log as CSV with a header row.
pub fn write_metrics_csv<W: Write>(log: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if log.is_empty() {
        w.write_record([
            "epoch",
            "l1",
            "l2",
            "l3",
            "total",
            "acc_f",
            "acc_o",
            "acc_fused",
            "lr",
        ])?;
    }
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Seed-deterministic stratified split into training and validation
/// positions of `dataset.instances`.
pub fn split(dataset: &Dataset, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seed::stream(cfg.seed, &[seed::TAG_SPLIT]);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for members in dataset.by_label() {
        let mut members = members;
        members.shuffle(&mut rng);
        let n_val = if members.len() < 2 {
            0
        } else {
            ((members.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, members.len() - 1)
        };
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    /// Validation report of the final model.
    pub report: EvalReport,
}

/// Trains a fresh model on `dataset`.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let spec = cfg.model_spec(dataset.d_in(), dataset.n_classes());
    let mut rng = seed::stream(cfg.seed, &[seed::TAG_INIT]);
    let model = Model::init(spec, &mut rng)?;
    let start = Checkpoint::fresh(cfg.clone(), model);
    resume(dataset, start)
}

/// Continues a run from `ckpt` until `ckpt.config.max_epochs` or early stop.
pub fn resume(dataset: &Dataset, ckpt: Checkpoint) -> Result<FitOutcome> {
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    let expected = cfg.model_spec(dataset.d_in(), dataset.n_classes());
    if ckpt.model.spec != expected {
        return Err(CcsError::Config(
            "checkpoint architecture does not match the config and dataset".into(),
        ));
    }
    let (train_pos, val_pos) = split(dataset, &cfg);
    let train: Vec<&Instance> = train_pos.iter().map(|&i| &dataset.instances[i]).collect();
    let val: Vec<&Instance> = val_pos.iter().map(|&i| &dataset.instances[i]).collect();
    let labels: Vec<usize> = train.iter().map(|i| i.label).collect();
    let index = LabelIndex::new(&labels);

    let mut ck = ckpt;
    let mut sgd = Sgd {
        velocity: std::mem::take(&mut ck.velocity),
    };
    let spec = ck.model.spec.clone();
    while !ck.stopped && ck.epoch < cfg.max_epochs {
        let epoch = ck.epoch;
        let lr = lr_at(epoch, &cfg);
        let plan = epoch_plan(&index, cfg.batch, cfg.seed, epoch)?;
        let mut sum = LossBreakdown::default();
        for (bi, batch) in plan.iter().enumerate() {
            let mut rng = seed::stream(cfg.seed, &[seed::TAG_SEGMENTS, epoch as u64, bi as u64]);
            let inputs = BatchInputs::sample(&train, batch, spec.segments, spec.snippet, &mut rng)
                .map_err(|e| CcsError::Config(format!("cannot cut training snippets: {e}")))?;
            let b =
                train_step(&mut ck.model, &mut sgd, &inputs, &cfg, lr).map_err(|e| match e {
                    CcsError::NonFinite(m) => {
                        CcsError::NonFinite(format!("epoch {epoch}, batch {bi}: {m}"))
                    }
                    other => other,
                })?;
            sum.l1 += b.l1;
            sum.l2 += b.l2;
            sum.l3 += b.l3;
            sum.total += b.total;
        }
        let nb = plan.len() as f64;
        let report = evaluate(&ck.model, &val, cfg.fusion_weight)?;
        ck.log.push(EpochMetrics {
            epoch,
            l1: sum.l1 / nb,
            l2: sum.l2 / nb,
            l3: sum.l3 / nb,
            total: sum.total / nb,
            acc_f: report.acc_f,
            acc_o: report.acc_o,
            acc_fused: report.acc_fused,
            lr,
        });
        ck.epoch = epoch + 1;
        if ck.best_acc.is_none_or(|b| report.acc_fused > b) {
            ck.best_acc = Some(report.acc_fused);
            ck.best_epoch = epoch;
            ck.stale = 0;
        } else {
            ck.stale += 1;
        }
        if cfg.early_stop_patience.is_some_and(|p| ck.stale >= p) {
            ck.stopped = true;
        }
    }
    ck.velocity = sgd.velocity;
    let report = evaluate(&ck.model, &val, cfg.fusion_weight)?;
    Ok(FitOutcome {
        checkpoint: ck,
        report,
    })
}
