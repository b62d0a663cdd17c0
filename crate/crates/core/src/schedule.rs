//! Schedule generation and clock-cycle accounting.
//!
//! Time is counted in clock cycles, one cycle being the time for one stage
//! to process one micro-batch (forward or backward). Three strategies:
//!
//! - no pipeline: `2M` cycles per micro-batch, density `1/M`;
//! - synchronous pipeline: `2(M+B-1)` cycles per mini-batch of `B`
//!   micro-batches, density `B/(M+B-1)`;
//! - asynchronous pipeline: closed-form timetable with
//!   `Forward(k,m)` at cycle `2k+m-1` and `Backward(k,m)` at cycle
//!   `2k+2M-m`, density → 1.
//!
//! The asynchronous timetable realizes the required staleness structure:
//! between the forward and backward of datum k at stage m exactly `M-m`
//! updates pass, so the forward at stage m observes weight version
//! `max(k-(M-m), 0)` (clamped during pipeline fill). Forward events at
//! stage m land on cycles of parity `(m-1) mod 2` and backward events on
//! parity `m mod 2`, so no stage ever sees two events in one cycle.

use serde::{Deserialize, Serialize};

/// Execution strategy for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    NoPipeline,
    /// Micro-batch count B comes from the run's batch plan
    /// (`B = B_mini / B_micro`).
    Synchronous,
    Asynchronous,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::NoPipeline => "nopipe",
            ScheduleKind::Synchronous => "sync",
            ScheduleKind::Asynchronous => "async",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Forward,
    Backward,
}

/// Atom of the pipeline simulation: stage `stage` processes datum `datum`
/// in direction `kind` during cycle `cycle`. Stages are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub cycle: u64,
    pub stage: usize,
    pub kind: EventKind,
    pub datum: usize,
}

/// Work accounting over one run.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CycleLedger {
    pub total_cycles: u64,
    /// Stage-cycles spent doing work (one per executed event).
    pub busy_slots: u64,
    /// Micro-batches fully processed (forward and backward complete).
    pub samples_completed: u64,
}

/// Cycles for `micro_batches` micro-batches without pipelining.
pub fn cycles_no_pipeline(m: usize, micro_batches: usize) -> u64 {
    assert!(m >= 1);
    2 * m as u64 * micro_batches as u64
}

/// Cycles for one mini-batch of `b` micro-batches in the synchronous
/// pipeline.
pub fn cycles_synchronous(m: usize, b: usize) -> u64 {
    assert!(m >= 1 && b >= 1);
    2 * (m + b - 1) as u64
}

pub fn async_forward_cycle(k: usize, stage: usize) -> u64 {
    2 * k as u64 + stage as u64 - 1
}

pub fn async_backward_cycle(k: usize, stage: usize, m: usize) -> u64 {
    2 * k as u64 + 2 * m as u64 - stage as u64
}

/// Weight version the forward of datum `k` observes at stage `stage` in
/// the asynchronous pipeline: `max(k - (M - stage), 0)`.
pub fn forward_version(k: usize, stage: usize, m: usize) -> u64 {
    assert!(stage >= 1 && stage <= m);
    k.saturating_sub(m - stage) as u64
}

/// The full asynchronous event stream for `k_total` data over `m` stages,
/// ordered by (cycle, stage). The final event lands on cycle
/// `2(k_total-1) + 2m - 1`.
pub fn async_event_stream(m: usize, k_total: usize) -> Vec<ScheduleEvent> {
    assert!(m >= 1 && k_total >= 1);
    let mut events = Vec::with_capacity(2 * m * k_total);
    for k in 0..k_total {
        for stage in 1..=m {
            events.push(ScheduleEvent {
                cycle: async_forward_cycle(k, stage),
                stage,
                kind: EventKind::Forward,
                datum: k,
            });
            events.push(ScheduleEvent {
                cycle: async_backward_cycle(k, stage, m),
                stage,
                kind: EventKind::Backward,
                datum: k,
            });
        }
    }
    events.sort_by_key(|e| (e.cycle, e.stage));
    events
}

/// `2 · samples_completed / total_cycles`: the fraction of ideal
/// throughput achieved (each micro-batch is two stage-cycles of useful
/// work per stage-pipeline pass).
pub fn measured_density(ledger: &CycleLedger) -> f64 {
    assert!(ledger.total_cycles > 0, "measured_density: empty ledger");
    2.0 * ledger.samples_completed as f64 / ledger.total_cycles as f64
}

/// Dump a schedule as CSV with columns `cycle,stage,kind,datum`.
pub fn write_timeline_csv<W: std::io::Write>(
    events: &[ScheduleEvent],
    out: W,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cycle", "stage", "kind", "datum"])?;
    for e in events {
        let kind = match e.kind {
            EventKind::Forward => "forward",
            EventKind::Backward => "backward",
        };
        w.write_record([
            e.cycle.to_string(),
            e.stage.to_string(),
            kind.to_string(),
            e.datum.to_string(),
        ])?;
    }
    w.flush()
}
