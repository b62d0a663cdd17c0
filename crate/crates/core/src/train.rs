//! Training runs under the three execution strategies.
//!
//! The no-pipeline and synchronous strategies share one mini-batch loop
//! (their weight dynamics are identical; only the clock accounting
//! differs). The asynchronous strategy has two implementations that must
//! produce bit-identical trajectories:
//!
//! - [`run_async_eventdriven`]: walks the closed-form event timetable in
//!   (cycle, stage) order, mutating each stage's weight in place. No
//!   weight copy ever exists in the update path; the staleness the
//!   hardware would see arises naturally from event ordering and is
//!   asserted against the closed form at every forward event.
//! - [`run_async_reference`]: a sequential per-datum loop that replays
//!   the same dynamics using per-stage ring buffers of past weight
//!   versions (a simulator artifact, depth ≤ M). It exists as the oracle
//!   for the event-driven engine.
//!
//! Within one backward event the order is fixed: compute the outgoing
//! error with the current (pre-update) weight, then apply the device
//! update. Metrics snapshots evaluate the version-consistent weights
//! `W_k = [W_k^(1), ..., W_k^(M)]`; in the event-driven engine these are
//! assembled by instrumentation copies as each stage reaches version k
//! (probe-level copies, not part of the update path).

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::data::{BatchPlan, Dataset};
use crate::device::{
    amplification_factor, amplification_factor_linear, analog_update, check_saturation,
    minibatch_analog_update, DeviceConfig, UpdateStats,
};
use crate::error::{Error, Result};
use crate::linalg::{outer, Matrix, Vector};
use crate::model::{
    forward_stage, ActivationKind, LossKind, NetworkModel, Sample, StageState,
};
use crate::model::full_gradient;
use crate::rngstream::{indexed_rng, stream_rng};
use crate::schedule::{
    async_event_stream, cycles_no_pipeline, cycles_synchronous, forward_version,
    measured_density, CycleLedger, EventKind, ScheduleKind,
};

const STREAM_INIT: u64 = 0x21;
const STREAM_NOISE: u64 = 0x22;

/// How long to run: a fixed number of updates (mini-batches for the
/// mini-batch strategies, micro-batches for the asynchronous one) or
/// whole epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunLength {
    Updates(usize),
    Epochs(usize),
}

/// Everything one run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub schedule: ScheduleKind,
    /// `[d_in, d_1, ..., d_M]`; the network has `len - 1` stages.
    pub stage_dims: Vec<usize>,
    pub activation: ActivationKind,
    pub loss: LossKind,
    pub device: DeviceConfig,
    pub alpha: f64,
    pub length: RunLength,
    pub b_mini: usize,
    pub b_micro: usize,
    /// Total gradient-noise standard deviation (spread over entries).
    pub noise_sigma: f64,
    pub seed: u64,
    /// Record metrics every this many updates.
    pub eval_every: usize,
    /// Held-out evaluation batch size (the experiment layer splits it off).
    pub eval_batch: usize,
    /// Epochs at whose start the learning rate is multiplied by 0.1.
    pub lr_decay_epochs: Vec<usize>,
    /// Slack parameter u for the asynchronous amplification factor.
    pub amp_u: f64,
    /// Keep a full per-version weight trajectory (testing aid).
    pub record_trajectory: bool,
}

impl RunConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_dims.len() - 1
    }

    pub fn micro_per_mini(&self) -> usize {
        self.b_mini / self.b_micro
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.stage_dims.len() < 2 {
            return Err(Error::config("stage_dims needs at least [d_in, d_out]"));
        }
        if self.stage_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("stage dimensions must be positive"));
        }
        if self.b_mini == 0 || self.b_micro == 0 || self.b_mini % self.b_micro != 0 {
            return Err(Error::config(format!(
                "B_mini ({}) not divisible by B_micro ({})",
                self.b_mini, self.b_micro
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be >= 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        if self.stage_dims[0] != data.feature_dim {
            return Err(Error::config(format!(
                "stage_dims[0] = {} but data feature_dim = {}",
                self.stage_dims[0], data.feature_dim
            )));
        }
        if *self.stage_dims.last().unwrap() != data.label_dim {
            return Err(Error::config(format!(
                "last stage dim = {} but data label_dim = {}",
                self.stage_dims.last().unwrap(),
                data.label_dim
            )));
        }
        if data.len() < self.b_mini {
            return Err(Error::config(format!(
                "dataset of {} samples smaller than B_mini = {}",
                data.len(),
                self.b_mini
            )));
        }
        Ok(())
    }

    fn minis_per_epoch(&self, n: usize) -> usize {
        n / self.b_mini
    }

    /// Updates this run performs: mini-batches for nopipe/sync,
    /// micro-batches for async.
    pub fn total_updates(&self, n: usize) -> usize {
        let per_epoch_minis = self.minis_per_epoch(n);
        match (self.schedule, self.length) {
            (_, RunLength::Updates(u)) => u,
            (ScheduleKind::Asynchronous, RunLength::Epochs(e)) => {
                e * per_epoch_minis * self.micro_per_mini()
            }
            (_, RunLength::Epochs(e)) => e * per_epoch_minis,
        }
    }

    /// Learning rate in effect during `epoch` (step decay ×0.1).
    fn alpha_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.alpha * 0.1f64.powi(decays as i32)
    }
}

/// Per-datum, per-stage stash between the forward and backward events:
/// the stage inputs and activation derivatives of one micro-batch.
#[derive(Debug, Clone)]
pub struct InFlightSlot {
    pub x_in: Vec<Vector>,
    pub gprime: Vec<Vector>,
}

/// One metrics row.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRecord {
    pub update_k: u64,
    pub clock_cycle: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub grad_norm_sq: f64,
    pub accuracy: Option<f64>,
    pub max_weight_inf: f64,
    pub samples_done: u64,
}

/// End-of-run summary.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub updates_total: u64,
    pub cycles_total: u64,
    pub samples_total: u64,
    pub measured_density: f64,
    pub max_saturation_degree: f64,
    pub saturation_events: u64,
    /// Amplification factor at u = 0 (squared-degree form).
    pub amplification_s: Option<f64>,
    /// Amplification factor at the configured u (squared-degree form).
    pub amplification_s_prime_u: Option<f64>,
    /// The linear-numerator variant, reported alongside for diagnostics.
    pub amplification_s_linear: Option<f64>,
    pub amp_u: f64,
}

/// Time series plus summary for one run.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    pub summary: RunSummary,
    pub ledger: CycleLedger,
    pub stats: UpdateStats,
    /// Forward events whose observed weight version was checked against
    /// the staleness law (asynchronous runs only).
    pub staleness_checks: u64,
    /// Per-version, per-stage weights, if requested.
    pub trajectory: Option<Vec<Vec<Matrix>>>,
}

impl RunMetrics {
    /// Clock cycle of the first record with `eval_loss <= target`.
    pub fn cycles_to_target_loss(&self, target: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.eval_loss <= target)
            .map(|r| r.clock_cycle)
    }

    /// Clock cycle of the first record with `accuracy >= target`.
    pub fn cycles_to_target_accuracy(&self, target: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.accuracy.is_some_and(|a| a >= target))
            .map(|r| r.clock_cycle)
    }

    /// Update index of the first record with `eval_loss <= target`.
    pub fn updates_to_target_loss(&self, target: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.eval_loss <= target)
            .map(|r| r.update_k)
    }
}

/// Full-batch evaluation of a frozen model.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub accuracy: Option<f64>,
}

/// Mean loss, squared Frobenius norm of the stacked gradient, and (for
/// classification) argmax accuracy on `eval_batch`.
pub fn eval_metrics(model: &NetworkModel, eval_batch: &[Sample]) -> Result<EvalMetrics> {
    let (loss, grads) = full_gradient(model, eval_batch)?;
    let mut grad_norm_sq = 0.0;
    for g in &grads {
        for v in g.as_slice() {
            grad_norm_sq += v * v;
        }
    }
    let accuracy = if model.loss == LossKind::SoftmaxCrossEntropy {
        let mut correct = 0usize;
        for s in eval_batch {
            let mut x = s.x.clone();
            for stage in &model.stages {
                x = forward_stage(stage, &x)?.x_out;
            }
            if x.argmax() == s.y.argmax() {
                correct += 1;
            }
        }
        Some(correct as f64 / eval_batch.len() as f64)
    } else {
        None
    };
    Ok(EvalMetrics {
        loss,
        grad_norm_sq,
        accuracy,
    })
}

/// Add zero-mean Gaussian noise with total variance `sigma²` spread over
/// the entries (per-entry variance `sigma²/numel`). `sigma = 0` returns
/// the input unchanged.
pub fn inject_noise<R: Rng>(g: &Matrix, sigma: f64, rng: &mut R) -> Matrix {
    if sigma == 0.0 {
        return g.clone();
    }
    let std = sigma / (g.as_slice().len() as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    Matrix::new(
        g.rows(),
        g.cols(),
        g.as_slice().iter().map(|v| v + normal.sample(rng)).collect(),
    )
}

/// Mean of the rank-1 gradients `δ_i ⊗ x_i` over one micro-batch,
/// accumulated in sample order.
fn micro_gradient(deltas: &[Vector], xs: &[Vector]) -> Matrix {
    let mut g = Matrix::zeros(deltas[0].len(), xs[0].len());
    for (d, x) in deltas.iter().zip(xs) {
        g = g.add_scaled(&outer(d, x), 1.0);
    }
    let inv = 1.0 / deltas.len() as f64;
    Matrix::new(
        g.rows(),
        g.cols(),
        g.as_slice().iter().map(|v| v * inv).collect(),
    )
}

fn init_model(cfg: &RunConfig) -> Result<NetworkModel> {
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    NetworkModel::random(
        &cfg.stage_dims,
        cfg.activation,
        cfg.loss,
        cfg.device,
        &mut rng,
    )
}

/// Resolve the shuffled micro-batch stream for the whole run up front, so
/// both asynchronous engines (and the mini-batch loop) consume exactly
/// the same data in the same order.
fn resolve_micro_stream(
    data: &Dataset,
    plan: &BatchPlan,
    total_micro: usize,
) -> Result<Vec<Vec<Sample>>> {
    let per_epoch = (data.len() / plan.b_mini) * plan.micro_per_mini();
    if per_epoch == 0 {
        return Err(Error::config("dataset smaller than one mini-batch"));
    }
    let epochs = total_micro.div_ceil(per_epoch);
    let mut out = Vec::with_capacity(total_micro);
    'outer: for epoch in 0..epochs {
        for idxs in plan.epoch_microbatches(data.len(), epoch as u64)? {
            if out.len() == total_micro {
                break 'outer;
            }
            out.push(idxs.iter().map(|&i| data.samples[i].clone()).collect());
        }
    }
    Ok(out)
}

fn noise_for(cfg: &RunConfig, g: Matrix, global_micro: u64, stage: usize) -> Matrix {
    if cfg.noise_sigma == 0.0 {
        return g;
    }
    let mut rng = indexed_rng(cfg.seed, STREAM_NOISE, global_micro, stage as u64);
    inject_noise(&g, cfg.noise_sigma, &mut rng)
}

fn model_with_weights(template: &NetworkModel, weights: Vec<Matrix>) -> NetworkModel {
    let stages = template
        .stages
        .iter()
        .zip(weights)
        .map(|(s, w)| StageState {
            weight: w,
            activation: s.activation,
            version: s.version,
            device: s.device,
        })
        .collect();
    NetworkModel {
        stages,
        loss: template.loss,
    }
}

/// Versions at which metrics are recorded: 0, multiples of `every`, and
/// the final update.
fn eval_points(total: u64, every: u64) -> Vec<u64> {
    let mut pts = vec![0];
    let mut v = every;
    while v < total {
        pts.push(v);
        v += every;
    }
    pts.push(total);
    pts.dedup();
    pts
}

/// Shared metrics recording, identical for every engine.
struct Recorder<'a> {
    eval_set: &'a [Sample],
    point_set: HashSet<u64>,
    /// Per-update training losses (index = update k), pushed in order.
    losses: Vec<f64>,
    records: Vec<MetricRecord>,
    window_start: usize,
    samples_per_update: u64,
}

impl<'a> Recorder<'a> {
    fn new(points: &[u64], eval_set: &'a [Sample], samples_per_update: u64) -> Self {
        Self {
            eval_set,
            point_set: points.iter().copied().collect(),
            losses: Vec::new(),
            records: Vec::new(),
            window_start: 0,
            samples_per_update,
        }
    }

    fn is_point(&self, v: u64) -> bool {
        self.point_set.contains(&v)
    }

    /// Record at version `v`; `model` must carry the version-v weights of
    /// every stage.
    fn record(&mut self, v: u64, model: &NetworkModel, clock_cycle: u64) -> Result<()> {
        let em = eval_metrics(model, self.eval_set)?;
        let window = &self.losses[self.window_start..v as usize];
        let train_loss = if window.is_empty() {
            em.loss
        } else {
            window.iter().sum::<f64>() / window.len() as f64
        };
        self.window_start = v as usize;
        let max_weight_inf = model
            .stages
            .iter()
            .fold(0.0f64, |m, s| m.max(s.weight.inf_norm()));
        self.records.push(MetricRecord {
            update_k: v,
            clock_cycle,
            train_loss,
            eval_loss: em.loss,
            grad_norm_sq: em.grad_norm_sq,
            accuracy: em.accuracy,
            max_weight_inf,
            samples_done: v * self.samples_per_update,
        });
        Ok(())
    }
}

fn finish(
    cfg: &RunConfig,
    records: Vec<MetricRecord>,
    ledger: CycleLedger,
    stats: UpdateStats,
    updates_total: u64,
    staleness_checks: u64,
    trajectory: Option<Vec<Vec<Matrix>>>,
) -> RunMetrics {
    let last = records.last().expect("every run records at least once");
    let degree = stats.max_inf_norm_seen * cfg.device.inv_tau();
    let summary = RunSummary {
        final_loss: last.eval_loss,
        final_accuracy: last.accuracy,
        updates_total,
        cycles_total: ledger.total_cycles,
        samples_total: ledger.samples_completed * cfg.b_micro as u64,
        measured_density: measured_density(&ledger),
        max_saturation_degree: degree,
        saturation_events: stats.saturation_events,
        amplification_s: amplification_factor(degree, 0.0).ok(),
        amplification_s_prime_u: amplification_factor(degree, cfg.amp_u).ok(),
        amplification_s_linear: amplification_factor_linear(
            stats.max_inf_norm_seen,
            cfg.device.inv_tau(),
        )
        .ok(),
        amp_u: cfg.amp_u,
    };
    RunMetrics {
        records,
        summary,
        ledger,
        stats,
        staleness_checks,
        trajectory,
    }
}

/// Dispatch on the configured schedule.
pub fn run(cfg: &RunConfig, data: &Dataset, eval_set: &[Sample]) -> Result<RunMetrics> {
    match cfg.schedule {
        ScheduleKind::NoPipeline | ScheduleKind::Synchronous => run_minibatch(cfg, data, eval_set),
        ScheduleKind::Asynchronous => run_async_eventdriven(cfg, data, eval_set),
    }
}

pub fn run_no_pipeline(cfg: &RunConfig, data: &Dataset, eval_set: &[Sample]) -> Result<RunMetrics> {
    if cfg.schedule != ScheduleKind::NoPipeline {
        return Err(Error::config("run_no_pipeline requires schedule = nopipe"));
    }
    run_minibatch(cfg, data, eval_set)
}

pub fn run_synchronous(cfg: &RunConfig, data: &Dataset, eval_set: &[Sample]) -> Result<RunMetrics> {
    if cfg.schedule != ScheduleKind::Synchronous {
        return Err(Error::config("run_synchronous requires schedule = sync"));
    }
    run_minibatch(cfg, data, eval_set)
}

/// Mini-batch strategies: every gradient of the mini-batch is taken at
/// W_k, then the device consumes them sequentially (step α/B each). The
/// no-pipeline and synchronous variants differ only in cycles charged
/// per mini-batch.
fn run_minibatch(cfg: &RunConfig, data: &Dataset, eval_set: &[Sample]) -> Result<RunMetrics> {
    cfg.validate(data)?;
    let m_stages = cfg.num_stages();
    let b = cfg.micro_per_mini();
    let plan = BatchPlan::new(cfg.b_mini, cfg.b_micro, cfg.seed)?;
    let k_total = cfg.total_updates(data.len());
    if k_total == 0 {
        return Err(Error::config("run length is zero updates"));
    }
    let stream = resolve_micro_stream(data, &plan, k_total * b)?;
    let minis_per_epoch = cfg.minis_per_epoch(data.len());

    let cycles_per_mini = match cfg.schedule {
        ScheduleKind::NoPipeline => cycles_no_pipeline(m_stages, b),
        ScheduleKind::Synchronous => cycles_synchronous(m_stages, b),
        ScheduleKind::Asynchronous => unreachable!(),
    };

    let mut model = init_model(cfg)?;
    let mut ledger = CycleLedger::default();
    let mut stats = UpdateStats::default();
    let points = eval_points(k_total as u64, cfg.eval_every as u64);
    let mut rec = Recorder::new(&points, eval_set, cfg.b_mini as u64);
    let mut traj: Option<Vec<Vec<Matrix>>> = cfg.record_trajectory.then(Vec::new);

    for k in 0..k_total {
        if let Some(t) = traj.as_mut() {
            t.push(model.weights());
        }
        if rec.is_point(k as u64) {
            rec.record(k as u64, &model, ledger.total_cycles)?;
        }
        let alpha_k = cfg.alpha_at_epoch(k / minis_per_epoch);

        let mut per_stage: Vec<Vec<Matrix>> = (0..m_stages).map(|_| Vec::with_capacity(b)).collect();
        let mut loss_sum = 0.0;
        for bi in 0..b {
            let micro = &stream[k * b + bi];
            let (loss, grads) = full_gradient(&model, micro)
                .map_err(|e| Error::run(format!("update {k}, micro-batch {bi}: {e}")))?;
            loss_sum += loss;
            let global_micro = (k * b + bi) as u64;
            for (mi, g) in grads.into_iter().enumerate() {
                per_stage[mi].push(noise_for(cfg, g, global_micro, mi + 1));
            }
        }
        rec.losses.push(loss_sum / b as f64);

        for (mi, grads) in per_stage.into_iter().enumerate() {
            let w = minibatch_analog_update(&model.stages[mi].weight, &grads, alpha_k, &cfg.device)
                .map_err(|e| Error::run(format!("update {k}, stage {}: {e}", mi + 1)))?;
            model.stages[mi].weight = w;
            model.stages[mi].version += 1;
            stats.updates_applied += 1;
            check_saturation(&model.stages[mi].weight, &cfg.device, &mut stats)
                .map_err(|e| Error::run(format!("update {k}, stage {}: {e}", mi + 1)))?;
        }

        ledger.total_cycles += cycles_per_mini;
        ledger.busy_slots += 2 * m_stages as u64 * b as u64;
        ledger.samples_completed += b as u64;
    }

    if let Some(t) = traj.as_mut() {
        t.push(model.weights());
    }
    rec.record(k_total as u64, &model, ledger.total_cycles)?;
    Ok(finish(cfg, rec.records, ledger, stats, k_total as u64, 0, traj))
}

/// The asynchronous pipeline, executed event by event in (cycle, stage)
/// order with in-place weight mutation. Forward events read whatever the
/// stage's live weight is — the staleness law (version
/// `max(k-(M-m), 0)`) is asserted at 100% of forward events.
pub fn run_async_eventdriven(
    cfg: &RunConfig,
    data: &Dataset,
    eval_set: &[Sample],
) -> Result<RunMetrics> {
    cfg.validate(data)?;
    if cfg.schedule != ScheduleKind::Asynchronous {
        return Err(Error::config("run_async_eventdriven requires schedule = async"));
    }
    let m_stages = cfg.num_stages();
    let plan = BatchPlan::new(cfg.b_mini, cfg.b_micro, cfg.seed)?;
    let k_total = cfg.total_updates(data.len());
    if k_total == 0 {
        return Err(Error::config("run length is zero updates"));
    }
    let stream = resolve_micro_stream(data, &plan, k_total)?;
    let micros_per_epoch = cfg.minis_per_epoch(data.len()) * cfg.micro_per_mini();

    let mut model = init_model(cfg)?;
    let mut ledger = CycleLedger::default();
    let mut stats = UpdateStats::default();
    let points = eval_points(k_total as u64, cfg.eval_every as u64);
    let mut rec = Recorder::new(&points, eval_set, cfg.b_micro as u64);
    let mut traj: Option<Vec<Vec<Option<Matrix>>>> = cfg
        .record_trajectory
        .then(|| vec![vec![None; m_stages]; k_total + 1]);
    let mut staleness_checks = 0u64;

    // version 0 snapshot
    if let Some(t) = traj.as_mut() {
        for (mi, s) in model.stages.iter().enumerate() {
            t[0][mi] = Some(s.weight.clone());
        }
    }
    rec.record(0, &model, 0)?;

    // Per-datum signals in flight between stages, and the per-stage
    // stashes between forward and backward.
    let mut fwd_signal: HashMap<usize, Vec<Vector>> = HashMap::new();
    let mut bwd_signal: HashMap<usize, Vec<Vector>> = HashMap::new();
    let mut slots: HashMap<(usize, usize), InFlightSlot> = HashMap::new();
    // Version-consistent eval snapshots under assembly.
    let mut pending: HashMap<u64, Vec<Option<Matrix>>> = HashMap::new();

    let events = async_event_stream(m_stages, k_total);
    for event in &events {
        let k = event.datum;
        let stage_idx = event.stage - 1;
        match event.kind {
            EventKind::Forward => {
                let stage = &model.stages[stage_idx];
                let expect = forward_version(k, event.stage, m_stages);
                if stage.version != expect {
                    return Err(Error::run(format!(
                        "staleness law violated at forward(k={k}, m={}): version {} != {expect}",
                        event.stage, stage.version
                    )));
                }
                staleness_checks += 1;

                let xs: Vec<Vector> = if event.stage == 1 {
                    stream[k].iter().map(|s| s.x.clone()).collect()
                } else {
                    fwd_signal.remove(&k).expect("forward signal present")
                };
                let mut x_outs = Vec::with_capacity(xs.len());
                let mut gprimes = Vec::with_capacity(xs.len());
                for x in &xs {
                    let fwd = forward_stage(stage, x).map_err(|e| {
                        Error::run(format!("forward(k={k}, m={}): {e}", event.stage))
                    })?;
                    x_outs.push(fwd.x_out);
                    gprimes.push(fwd.gprime);
                }
                slots.insert(
                    (event.stage, k),
                    InFlightSlot {
                        x_in: xs,
                        gprime: gprimes,
                    },
                );
                if event.stage < m_stages {
                    fwd_signal.insert(k, x_outs);
                } else {
                    // Loss head, charged to the last stage's forward cycle.
                    let mut grads = Vec::with_capacity(x_outs.len());
                    let mut loss_sum = 0.0;
                    for (out, s) in x_outs.iter().zip(&stream[k]) {
                        let (l, g) = cfg.loss.value_and_grad(out, &s.y)?;
                        loss_sum += l;
                        grads.push(g);
                    }
                    rec.losses.push(loss_sum / x_outs.len() as f64);
                    bwd_signal.insert(k, grads);
                }
            }
            EventKind::Backward => {
                let incoming = bwd_signal.remove(&k).expect("backward signal present");
                let slot = slots.remove(&(event.stage, k)).expect("in-flight slot present");
                let deltas: Vec<Vector> = incoming
                    .iter()
                    .zip(&slot.gprime)
                    .map(|(e, gp)| e.hadamard(gp))
                    .collect();
                // Outgoing error first, with the pre-update weight.
                if event.stage > 1 {
                    let w = &model.stages[stage_idx].weight;
                    bwd_signal.insert(k, deltas.iter().map(|d| w.vecmat(d)).collect());
                }
                let g = micro_gradient(&deltas, &slot.x_in);
                let g = noise_for(cfg, g, k as u64, event.stage);
                let alpha_k = cfg.alpha_at_epoch(k / micros_per_epoch);
                let stage = &mut model.stages[stage_idx];
                stage.weight = analog_update(&stage.weight, &g, alpha_k, &cfg.device)
                    .map_err(|e| Error::run(format!("update k={k}, stage {}: {e}", event.stage)))?;
                stage.version += 1;
                stats.updates_applied += 1;
                check_saturation(&stage.weight, &cfg.device, &mut stats)
                    .map_err(|e| Error::run(format!("update k={k}, stage {}: {e}", event.stage)))?;

                let version = stage.version;
                if let Some(t) = traj.as_mut() {
                    t[version as usize][stage_idx] = Some(stage.weight.clone());
                }
                if rec.is_point(version) {
                    let entry = pending
                        .entry(version)
                        .or_insert_with(|| vec![None; m_stages]);
                    entry[stage_idx] = Some(model.stages[stage_idx].weight.clone());
                    if entry.iter().all(|w| w.is_some()) {
                        let weights = pending
                            .remove(&version)
                            .unwrap()
                            .into_iter()
                            .map(|w| w.unwrap())
                            .collect();
                        let snap = model_with_weights(&model, weights);
                        rec.record(version, &snap, event.cycle + 1)?;
                    }
                }
                if event.stage == 1 {
                    ledger.samples_completed += 1;
                }
            }
        }
        ledger.busy_slots += 1;
        ledger.total_cycles = event.cycle + 1;
    }

    let traj = traj.map(|t| {
        t.into_iter()
            .map(|row| row.into_iter().map(|w| w.expect("trajectory complete")).collect())
            .collect()
    });
    Ok(finish(
        cfg,
        rec.records,
        ledger,
        stats,
        k_total as u64,
        staleness_checks,
        traj,
    ))
}

/// Sequential per-datum replay of the asynchronous dynamics ("data
/// perspective"). Forward passes read stale weights from per-stage ring
/// buffers (depth ≤ M); backward and update follow the same fixed
/// operation order as the event-driven engine, so the two trajectories
/// are bit-identical.
pub fn run_async_reference(
    cfg: &RunConfig,
    data: &Dataset,
    eval_set: &[Sample],
) -> Result<RunMetrics> {
    cfg.validate(data)?;
    if cfg.schedule != ScheduleKind::Asynchronous {
        return Err(Error::config("run_async_reference requires schedule = async"));
    }
    let m_stages = cfg.num_stages();
    let plan = BatchPlan::new(cfg.b_mini, cfg.b_micro, cfg.seed)?;
    let k_total = cfg.total_updates(data.len());
    if k_total == 0 {
        return Err(Error::config("run length is zero updates"));
    }
    let stream = resolve_micro_stream(data, &plan, k_total)?;
    let micros_per_epoch = cfg.minis_per_epoch(data.len()) * cfg.micro_per_mini();

    let mut model = init_model(cfg)?;
    let mut stats = UpdateStats::default();
    let points = eval_points(k_total as u64, cfg.eval_every as u64);
    let mut rec = Recorder::new(&points, eval_set, cfg.b_micro as u64);
    let mut traj: Option<Vec<Vec<Matrix>>> = cfg.record_trajectory.then(Vec::new);
    let mut staleness_checks = 0u64;

    // Ring buffers of past versions, newest first; [0] is the current
    // weight. A simulator artifact standing in for analog weight stashing.
    let mut history: Vec<std::collections::VecDeque<Matrix>> = model
        .stages
        .iter()
        .map(|s| std::collections::VecDeque::from([s.weight.clone()]))
        .collect();

    let clock_at = |v: u64| -> u64 {
        if v == 0 {
            0
        } else {
            2 * (v - 1) + 2 * m_stages as u64 - 1 + 1
        }
    };

    for k in 0..k_total {
        if let Some(t) = traj.as_mut() {
            t.push(model.weights());
        }
        if rec.is_point(k as u64) {
            rec.record(k as u64, &model, clock_at(k as u64))?;
        }

        // Forward with delayed weights.
        let mut xs: Vec<Vector> = stream[k].iter().map(|s| s.x.clone()).collect();
        let mut slot_x: Vec<Vec<Vector>> = Vec::with_capacity(m_stages);
        let mut slot_gp: Vec<Vec<Vector>> = Vec::with_capacity(m_stages);
        for mi in 0..m_stages {
            let stage_no = mi + 1;
            let need = forward_version(k, stage_no, m_stages);
            let idx = (model.stages[mi].version - need) as usize;
            let delayed = StageState {
                weight: history[mi][idx].clone(),
                activation: model.stages[mi].activation,
                version: need,
                device: model.stages[mi].device,
            };
            staleness_checks += 1;
            let mut outs = Vec::with_capacity(xs.len());
            let mut gps = Vec::with_capacity(xs.len());
            for x in &xs {
                let fwd = forward_stage(&delayed, x)
                    .map_err(|e| Error::run(format!("forward(k={k}, m={stage_no}): {e}")))?;
                outs.push(fwd.x_out);
                gps.push(fwd.gprime);
            }
            slot_x.push(xs);
            slot_gp.push(gps);
            xs = outs;
        }

        // Loss head.
        let mut incoming = Vec::with_capacity(xs.len());
        let mut loss_sum = 0.0;
        for (out, s) in xs.iter().zip(&stream[k]) {
            let (l, g) = cfg.loss.value_and_grad(out, &s.y)?;
            loss_sum += l;
            incoming.push(g);
        }
        rec.losses.push(loss_sum / xs.len() as f64);

        // Backward and update, stage M down to 1, outgoing error before
        // the update (same order as the event-driven engine).
        let alpha_k = cfg.alpha_at_epoch(k / micros_per_epoch);
        for mi in (0..m_stages).rev() {
            let deltas: Vec<Vector> = incoming
                .iter()
                .zip(&slot_gp[mi])
                .map(|(e, gp)| e.hadamard(gp))
                .collect();
            if mi > 0 {
                let w = &model.stages[mi].weight;
                incoming = deltas.iter().map(|d| w.vecmat(d)).collect();
            }
            let g = micro_gradient(&deltas, &slot_x[mi]);
            let g = noise_for(cfg, g, k as u64, mi + 1);
            let stage = &mut model.stages[mi];
            stage.weight = analog_update(&stage.weight, &g, alpha_k, &cfg.device)
                .map_err(|e| Error::run(format!("update k={k}, stage {}: {e}", mi + 1)))?;
            stage.version += 1;
            stats.updates_applied += 1;
            check_saturation(&stage.weight, &cfg.device, &mut stats)
                .map_err(|e| Error::run(format!("update k={k}, stage {}: {e}", mi + 1)))?;
            history[mi].push_front(stage.weight.clone());
            history[mi].truncate(m_stages);
        }
    }

    if let Some(t) = traj.as_mut() {
        t.push(model.weights());
    }
    rec.record(k_total as u64, &model, clock_at(k_total as u64))?;

    // The reference charges the same closed-form clock as the timetable.
    let ledger = CycleLedger {
        total_cycles: clock_at(k_total as u64),
        busy_slots: 2 * m_stages as u64 * k_total as u64,
        samples_completed: k_total as u64,
    };
    Ok(finish(
        cfg,
        rec.records,
        ledger,
        stats,
        k_total as u64,
        staleness_checks,
        traj,
    ))
}
