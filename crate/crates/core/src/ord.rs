//! Online robust distillation: co-trains the generator alongside the
//! robust model and refreshes the served label snapshot every T
//! generator epochs.
//!
//! "Concurrently" is realized as deterministic interleaving: before each
//! robust epoch the generator runs a fixed number of its own epochs, and
//! when the generator-epoch counter crosses a multiple of T the snapshot
//! is rebuilt from weakly augmented generator outputs and swapped in
//! between robust epochs. Snapshots are immutable; the robust trainer
//! reads exactly one snapshot per epoch. Gradients never flow from the
//! robust model back into the generator.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robust::SnapshotProvider;
use crate::ssl::{GenEpochMetrics, GeneratorTrainer, PseudoLabelSnapshot};

/// Refresh cadence for online distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ORDSchedule {
    /// Generator epochs between label refreshes (T).
    pub refresh_period: usize,
    /// Generator epochs run before each robust epoch.
    pub generator_epochs_per_robust_epoch: usize,
    /// When false the initial snapshot is served forever (two-stage
    /// fallback) and the generator stops training.
    pub enabled: bool,
}

impl ORDSchedule {
    /// Reference cadence: refresh every 5 generator epochs, one
    /// generator epoch per robust epoch.
    pub fn reference() -> Self {
        Self {
            refresh_period: 5,
            generator_epochs_per_robust_epoch: 1,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.refresh_period == 0 {
            return Err(Error::config("refresh_period must be at least 1"));
        }
        if self.enabled && self.generator_epochs_per_robust_epoch == 0 {
            return Err(Error::config(
                "generator_epochs_per_robust_epoch must be at least 1 when enabled",
            ));
        }
        Ok(())
    }
}

/// Mutable scheduler state.
pub struct OrdState {
    /// Generator epochs completed since the robust phase started.
    pub generator_epochs: usize,
    /// Next generator-epoch multiple of T that triggers a refresh.
    pub next_refresh_at: usize,
    pub snapshot: Arc<PseudoLabelSnapshot>,
    pub refresh_count: u64,
}

impl OrdState {
    pub fn new(initial: Arc<PseudoLabelSnapshot>, schedule: &ORDSchedule) -> Self {
        Self {
            generator_epochs: 0,
            next_refresh_at: schedule.refresh_period,
            snapshot: initial,
            refresh_count: 0,
        }
    }
}

/// A snapshot swap, for the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefreshEvent {
    /// Generator epochs since the robust phase started.
    pub generator_epoch: usize,
    /// Robust epoch about to start when the swap happened.
    pub robust_epoch: usize,
    pub snapshot_id: u64,
    pub content_hash: String,
}

/// Refresh the snapshot if at least T generator epochs have elapsed since
/// the last refresh; otherwise keep the current one. Returns the new
/// snapshot when a swap happened.
pub fn ord_tick(
    state: &mut OrdState,
    schedule: &ORDSchedule,
    generator: &GeneratorTrainer,
    pool: &[usize],
) -> Result<Option<Arc<PseudoLabelSnapshot>>> {
    schedule.validate()?;
    if !schedule.enabled || state.generator_epochs < state.next_refresh_at {
        return Ok(None);
    }
    state.refresh_count += 1;
    let snapshot = Arc::new(generator.snapshot(pool, state.refresh_count)?);
    state.snapshot = Arc::clone(&snapshot);
    // advance past the crossed multiple(s); a ratio larger than T still
    // yields one refresh per crossing batch
    while state.next_refresh_at <= state.generator_epochs {
        state.next_refresh_at += schedule.refresh_period;
    }
    Ok(Some(snapshot))
}

/// Snapshot provider that advances the generator before each robust
/// epoch and swaps refreshed snapshots in atomically between epochs.
pub struct OrdProvider<'a> {
    generator: &'a mut GeneratorTrainer,
    schedule: ORDSchedule,
    pool: Vec<usize>,
    state: OrdState,
    pub generator_metrics: Vec<GenEpochMetrics>,
    pub refresh_events: Vec<RefreshEvent>,
}

impl<'a> OrdProvider<'a> {
    /// Takes the initial snapshot from the generator's current state
    /// (snapshot id 0).
    pub fn new(
        generator: &'a mut GeneratorTrainer,
        schedule: ORDSchedule,
        pool: Vec<usize>,
    ) -> Result<Self> {
        schedule.validate()?;
        let initial = Arc::new(generator.snapshot(&pool, 0)?);
        let state = OrdState::new(initial, &schedule);
        Ok(Self {
            generator,
            schedule,
            pool,
            state,
            generator_metrics: Vec::new(),
            refresh_events: Vec::new(),
        })
    }

    pub fn schedule(&self) -> &ORDSchedule {
        &self.schedule
    }

    pub fn current_snapshot(&self) -> &Arc<PseudoLabelSnapshot> {
        &self.state.snapshot
    }
}

impl SnapshotProvider for OrdProvider<'_> {
    fn before_epoch(&mut self, robust_epoch: usize) -> Result<Arc<PseudoLabelSnapshot>> {
        if self.schedule.enabled {
            for _ in 0..self.schedule.generator_epochs_per_robust_epoch {
                self.generator_metrics.push(self.generator.run_epoch()?);
                self.state.generator_epochs += 1;
            }
            if let Some(snap) = ord_tick(&mut self.state, &self.schedule, self.generator, &self.pool)?
            {
                self.refresh_events.push(RefreshEvent {
                    generator_epoch: self.state.generator_epochs,
                    robust_epoch,
                    snapshot_id: snap.id,
                    content_hash: snap.content_hash(),
                });
            }
        }
        Ok(Arc::clone(&self.state.snapshot))
    }
}
