//! Metrics, ablation grid, fusion-factor sweeps, and report files.
//!
//! Robust accuracy reported here always includes the clean input in the
//! attacker's candidate set, so RA ≤ SA holds exactly and more restarts
//! can only lower RA. The strong column is multi-restart PGD and is
//! labeled "RA-strong" — it is not an AutoAttack ensemble.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attacks::{evaluate_robust_accuracy, AttackSpec, EvalExampleRecord};
use crate::data::{Dataset, SSLSplit};
use crate::error::{Error, Result};
use crate::model::convnet::{ArchSpec, ConvNet};
use crate::nar::UnlabeledMode;
use crate::ord::{OrdProvider, ORDSchedule, RefreshEvent};
use crate::rng::{derive_rng, mix, tag};
use crate::robust::{
    train_robust, RobustEpochMetrics, RobustTrainConfig, StaticSnapshotProvider, TargetStrategy,
};
use crate::ssl::{
    pseudo_label_error_rate, GenEpochMetrics, GeneratorTrainer, PseudoLabelSnapshot,
    SSLTrainerConfig,
};
use rand::Rng;

/// Attack specs and seed for one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Headline robust-accuracy attack (20 steps, single restart).
    pub pgd: AttackSpec,
    /// Strong attack: same steps, more restarts.
    pub strong: AttackSpec,
    pub seed: u64,
}

impl EvalConfig {
    pub fn reference(seed: u64) -> Self {
        Self {
            pgd: AttackSpec::pgd20(),
            strong: AttackSpec::pgd20_strong(),
            seed,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.pgd = self.pgd.with_epsilon(epsilon);
        self.strong = self.strong.with_epsilon(epsilon);
        self
    }
}

/// Headline metrics of one evaluated model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub sa: f64,
    /// Robust accuracy under the headline attack.
    pub ra: f64,
    /// Robust accuracy under the multi-restart attack ("RA-strong").
    pub ra_strong: f64,
    /// Argmax error of the pseudo-label snapshot the run trained on,
    /// against hidden ground truth.
    pub pseudo_label_error: Option<f64>,
    /// RA divided by an oracle run's RA, when one is referenced.
    pub relative_ra: Option<f64>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sa", self.sa),
            ("ra", self.ra),
            ("ra_strong", self.ra_strong),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if let Some(e) = self.pseudo_label_error {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invalid(format!("pseudo_label_error = {e}")));
            }
        }
        Ok(())
    }
}

/// Evaluation output: the report plus per-example audit records.
pub struct EvalOutput {
    pub report: EvalReport,
    pub records: Vec<EvalExampleRecord>,
    pub records_strong: Vec<EvalExampleRecord>,
}

/// Clean and robust accuracy of a frozen model on `indices`.
pub fn evaluate(
    model: &ConvNet<f32>,
    dataset: &Dataset,
    indices: &[usize],
    config: &EvalConfig,
) -> Result<EvalOutput> {
    let pgd = evaluate_robust_accuracy(model, dataset, indices, &config.pgd, config.seed)?;
    let strong = evaluate_robust_accuracy(
        model,
        dataset,
        indices,
        &config.strong,
        mix(config.seed, &[tag::EVAL, 0x57]),
    )?;
    let report = EvalReport {
        sa: pgd.standard_accuracy,
        ra: pgd.robust_accuracy,
        ra_strong: strong.robust_accuracy,
        pseudo_label_error: None,
        relative_ra: None,
    };
    report.validate()?;
    Ok(EvalOutput {
        report,
        records: pgd.records,
        records_strong: strong.records,
    })
}

/// RA of a run relative to an oracle (fully supervised) run evaluated
/// under the identical attack configuration.
pub fn relative_robustness(report: &EvalReport, oracle: &EvalReport) -> Result<f64> {
    if oracle.ra <= 0.0 {
        return Err(Error::invalid("oracle robust accuracy is zero"));
    }
    Ok(report.ra / oracle.ra)
}

/// Component toggles defining one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    /// Semi-supervised generator (otherwise supervised on labeled only).
    pub ssl_algo: bool,
    /// Noise-aware rectification (otherwise hard one-hot targets).
    pub nar: bool,
    /// Online label refreshes (otherwise a static initial snapshot).
    pub ord: bool,
}

impl AblationToggles {
    /// The five standard rows (a)–(e).
    pub fn standard_rows() -> [(&'static str, AblationToggles); 5] {
        [
            ("a", AblationToggles { ssl_algo: false, nar: false, ord: false }),
            ("b", AblationToggles { ssl_algo: true, nar: false, ord: false }),
            ("c", AblationToggles { ssl_algo: true, nar: true, ord: false }),
            ("d", AblationToggles { ssl_algo: true, nar: false, ord: true }),
            ("e", AblationToggles { ssl_algo: true, nar: true, ord: true }),
        ]
    }

    /// Full pipeline (row (e)).
    pub fn all_on() -> Self {
        Self {
            ssl_algo: true,
            nar: true,
            ord: true,
        }
    }
}

/// Shared plumbing for one end-to-end pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub gen_arch: ArchSpec,
    pub robust_arch: ArchSpec,
    pub gen_config: SSLTrainerConfig,
    pub robust_config: RobustTrainConfig,
    pub ord: ORDSchedule,
    /// Generator epochs before the robust stage starts.
    pub gen_pretrain_epochs: usize,
    pub eval: EvalConfig,
}

impl PipelineParams {
    /// Rekey every per-run seed (init, batch order, attacks, sampling,
    /// evaluation) while keeping budgets and hyperparameters.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gen_config.seed = seed;
        self.robust_config.seed = seed;
        self.robust_config.nar.seed = seed;
        self.eval.seed = seed;
        self
    }
}

/// Everything a pipeline run produced.
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub best_epoch: usize,
    pub best_ra_val: f64,
    pub gen_metrics: Vec<GenEpochMetrics>,
    pub robust_history: Vec<RobustEpochMetrics>,
    pub refresh_events: Vec<RefreshEvent>,
    /// Snapshot argmax error on the unlabeled set when the robust stage
    /// started.
    pub initial_pl_error: f64,
}

/// Train generator (semi-supervised or supervised-only) for the
/// pretraining budget, then adversarially train the robust model under
/// the toggles, and evaluate the best checkpoint on the validation set.
pub fn run_pipeline(
    dataset: &Arc<Dataset>,
    split: &SSLSplit,
    toggles: AblationToggles,
    params: &PipelineParams,
) -> Result<PipelineOutcome> {
    // Supervised-only generators see an empty unlabeled set but keep the
    // same step budget.
    let gen_split = if toggles.ssl_algo {
        split.clone()
    } else {
        SSLSplit {
            unlabeled_indices: Vec::new(),
            ..split.clone()
        }
    };
    let mut gen = GeneratorTrainer::new(
        Arc::clone(dataset),
        &gen_split,
        params.gen_arch.clone(),
        params.gen_config.clone(),
    )?;
    let mut gen_metrics = Vec::new();
    for _ in 0..params.gen_pretrain_epochs {
        gen_metrics.push(gen.run_epoch()?);
    }

    let mut robust_config = params.robust_config.clone();
    robust_config.strategy = if toggles.nar {
        TargetStrategy::Snord
    } else {
        TargetStrategy::HardPseudo
    };

    let pool = split.pool_indices();
    let initial = Arc::new(gen.snapshot(&pool, 0)?);
    let initial_pl_error =
        pseudo_label_error_rate(&initial, dataset.labels(), &split.unlabeled_indices)?;

    let schedule = if toggles.ord {
        params.ord
    } else {
        ORDSchedule::disabled()
    };
    let mut provider = OrdProvider::new(&mut gen, schedule, pool)?;
    let result = train_robust(
        Arc::clone(dataset),
        split,
        params.robust_arch.clone(),
        robust_config,
        &mut provider,
    )?;
    let refresh_events = provider.refresh_events.clone();
    gen_metrics.extend(provider.generator_metrics.clone());

    let best = ConvNet::from_params(params.robust_arch.clone(), result.best_params.clone())?;
    let out = evaluate(&best, dataset, &split.val_indices, &params.eval)?;
    let report = EvalReport {
        pseudo_label_error: Some(initial_pl_error),
        ..out.report
    };
    Ok(PipelineOutcome {
        report,
        best_epoch: result.best_epoch,
        best_ra_val: result.best_ra,
        gen_metrics,
        robust_history: result.history,
        refresh_events,
        initial_pl_error,
    })
}

/// Basic robust self-training baseline: supervised generator, hard
/// argmax pseudo labels, CE on adversarial examples, no consistency
/// term, no refreshes. Shares every budget with `run_pipeline`.
pub fn run_hard_label_baseline(
    dataset: &Arc<Dataset>,
    split: &SSLSplit,
    params: &PipelineParams,
) -> Result<PipelineOutcome> {
    let gen_split = SSLSplit {
        unlabeled_indices: Vec::new(),
        ..split.clone()
    };
    let mut gen = GeneratorTrainer::new(
        Arc::clone(dataset),
        &gen_split,
        params.gen_arch.clone(),
        params.gen_config.clone(),
    )?;
    let mut gen_metrics = Vec::new();
    for _ in 0..params.gen_pretrain_epochs {
        gen_metrics.push(gen.run_epoch()?);
    }
    let pool = split.pool_indices();
    let initial = Arc::new(gen.snapshot(&pool, 0)?);
    let initial_pl_error =
        pseudo_label_error_rate(&initial, dataset.labels(), &split.unlabeled_indices)?;

    let mut robust_config = params.robust_config.clone();
    robust_config.strategy = TargetStrategy::HardLabelRst;
    let mut provider = StaticSnapshotProvider(initial);
    let result = train_robust(
        Arc::clone(dataset),
        split,
        params.robust_arch.clone(),
        robust_config,
        &mut provider,
    )?;
    let best = ConvNet::from_params(params.robust_arch.clone(), result.best_params.clone())?;
    let out = evaluate(&best, dataset, &split.val_indices, &params.eval)?;
    let report = EvalReport {
        pseudo_label_error: Some(initial_pl_error),
        ..out.report
    };
    Ok(PipelineOutcome {
        report,
        best_epoch: result.best_epoch,
        best_ra_val: result.best_ra,
        gen_metrics,
        robust_history: result.history,
        refresh_events: Vec::new(),
        initial_pl_error,
    })
}

/// One ablation row aggregated over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: AblationToggles,
    pub mean_sa: f64,
    pub mean_ra: f64,
    pub mean_ra_strong: f64,
    pub per_seed: Vec<EvalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

/// Run the toggle grid; all rows share the split, budgets, and the seed
/// list, so rows differ only in their components.
pub fn ablation_grid(
    dataset: &Arc<Dataset>,
    split: &SSLSplit,
    params: &PipelineParams,
    rows: &[(&str, AblationToggles)],
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (label, toggles) in rows {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let p = params.clone().with_seed(seed);
            per_seed.push(run_pipeline(dataset, split, *toggles, &p)?.report);
        }
        let mean = |f: fn(&EvalReport) -> f64| {
            per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64
        };
        out.push(AblationRow {
            label: label.to_string(),
            toggles: *toggles,
            mean_sa: mean(|r| r.sa),
            mean_ra: mean(|r| r.ra),
            mean_ra_strong: mean(|r| r.ra_strong),
            per_seed,
        });
    }
    Ok(AblationTable {
        rows: out,
        seeds: seeds.to_vec(),
    })
}

impl AblationTable {
    /// Fixed column order: label,ssl_algo,nar,ord,seed,sa,ra,ra_strong.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,ssl_algo,nar,ord,seed,sa,ra,ra_strong\n");
        for row in &self.rows {
            for (report, seed) in row.per_seed.iter().zip(&self.seeds) {
                s.push_str(&format!(
                    "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
                    row.label,
                    row.toggles.ssl_algo,
                    row.toggles.nar,
                    row.toggles.ord,
                    seed,
                    report.sa,
                    report.ra,
                    report.ra_strong
                ));
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("row  ssl  nar  ord   mean SA   mean RA   mean RA-strong\n");
        for row in &self.rows {
            s.push_str(&format!(
                "({})  {:>3}  {:>3}  {:>3}   {:.4}    {:.4}    {:.4}\n",
                row.label,
                if row.toggles.ssl_algo { "on" } else { "off" },
                if row.toggles.nar { "on" } else { "off" },
                if row.toggles.ord { "on" } else { "off" },
                row.mean_sa,
                row.mean_ra,
                row.mean_ra_strong
            ));
        }
        s
    }
}

/// Synthetic noisy pseudo-label construction for sensitivity runs: a
/// controlled fraction of examples gets a wrong argmax while keeping
/// real mass on the true class, so sampling can still recover it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisySnapshotSpec {
    /// Fraction of examples whose argmax is wrong.
    pub error_rate: f64,
    /// True-class mass on corrupted examples (< wrong_mass).
    pub noisy_true_mass: f64,
    /// Wrong-class mass on corrupted examples.
    pub noisy_wrong_mass: f64,
    /// True-class mass on clean examples; the rest is uniform.
    pub clean_true_mass: f64,
    pub seed: u64,
}

impl NoisySnapshotSpec {
    pub fn half_noise(seed: u64) -> Self {
        Self {
            error_rate: 0.5,
            noisy_true_mass: 0.49,
            noisy_wrong_mass: 0.51,
            clean_true_mass: 0.9,
            seed,
        }
    }
}

/// Build a snapshot with the exact corruption pattern of `spec` from the
/// hidden true labels.
pub fn build_noisy_snapshot(
    dataset: &Dataset,
    pool: &[usize],
    spec: &NoisySnapshotSpec,
) -> Result<PseudoLabelSnapshot> {
    let c = dataset.num_classes();
    if c < 2 {
        return Err(Error::config("noisy snapshot needs at least 2 classes"));
    }
    let mut probs = Array2::<f32>::zeros((pool.len(), c));
    for (row, &idx) in pool.iter().enumerate() {
        let y = dataset.label(idx);
        let mut rng = derive_rng(spec.seed, &[tag::NOISY_SNAPSHOT, idx as u64]);
        let noisy = rng.gen_bool(spec.error_rate);
        if noisy {
            let mut wrong = rng.gen_range(0..c - 1);
            if wrong >= y {
                wrong += 1;
            }
            let rest = 1.0 - spec.noisy_true_mass - spec.noisy_wrong_mass;
            let fill = if c > 2 { rest / (c - 2) as f64 } else { 0.0 };
            for j in 0..c {
                probs[[row, j]] = fill as f32;
            }
            probs[[row, y]] = spec.noisy_true_mass as f32;
            probs[[row, wrong]] = spec.noisy_wrong_mass as f32;
        } else {
            let fill = (1.0 - spec.clean_true_mass) / (c - 1) as f64;
            for j in 0..c {
                probs[[row, j]] = fill as f32;
            }
            probs[[row, y]] = spec.clean_true_mass as f32;
        }
    }
    PseudoLabelSnapshot::new(0, 0, pool.to_vec(), probs)
}

/// Uniform-distribution snapshot; placeholder labels for oracle arms
/// where λ = 0 makes the distribution content irrelevant.
pub fn uniform_snapshot(pool: &[usize], num_classes: usize) -> Result<PseudoLabelSnapshot> {
    let probs = Array2::<f32>::from_elem((pool.len(), num_classes), 1.0 / num_classes as f32);
    PseudoLabelSnapshot::new(0, 0, pool.to_vec(), probs)
}

/// One sweep cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub mode: UnlabeledMode,
    pub seed: u64,
    pub sa: f64,
    pub ra: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn mean_ra(&self, lambda: f64, mode: UnlabeledMode) -> f64 {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.lambda == lambda && c.mode == mode)
            .map(|c| c.ra)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn mode_mean_ra(&self, mode: UnlabeledMode) -> f64 {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.mode == mode)
            .map(|c| c.ra)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    /// Fixed column order: lambda,mode,seed,sa,ra.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,mode,seed,sa,ra\n");
        for c in &self.cells {
            let mode = match c.mode {
                UnlabeledMode::Sample => "sample",
                UnlabeledMode::Argmax => "argmax",
            };
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                c.lambda, mode, c.seed, c.sa, c.ra
            ));
        }
        s
    }

    /// Two-column plot data (λ, mean RA) for one mode.
    pub fn plot_data(&self, mode: UnlabeledMode, lambdas: &[f64]) -> String {
        let mut s = String::new();
        for &l in lambdas {
            s.push_str(&format!("{} {:.6}\n", l, self.mean_ra(l, mode)));
        }
        s
    }
}

/// Sweep the fusion factor under controlled-noise pseudo labels: for
/// each (λ, mode, seed) run a short robust training against a static
/// noisy snapshot and evaluate the best checkpoint.
pub fn lambda_sweep(
    dataset: &Arc<Dataset>,
    split: &SSLSplit,
    params: &PipelineParams,
    lambdas: &[f64],
    modes: &[UnlabeledMode],
    noise: &NoisySnapshotSpec,
    seeds: &[u64],
) -> Result<SweepTable> {
    if lambdas.is_empty() || modes.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs lambdas, modes, and seeds"));
    }
    let pool = split.pool_indices();
    let snapshot = Arc::new(build_noisy_snapshot(dataset, &pool, noise)?);
    let mut cells = Vec::new();
    for &lambda in lambdas {
        for &mode in modes {
            for &seed in seeds {
                let mut p = params.clone().with_seed(seed);
                p.robust_config.strategy = TargetStrategy::Snord;
                p.robust_config.nar.lambda = lambda;
                p.robust_config.nar.unlabeled_mode = mode;
                let mut provider = StaticSnapshotProvider(Arc::clone(&snapshot));
                let result = train_robust(
                    Arc::clone(dataset),
                    split,
                    p.robust_arch.clone(),
                    p.robust_config.clone(),
                    &mut provider,
                )?;
                let best =
                    ConvNet::from_params(p.robust_arch.clone(), result.best_params.clone())?;
                let out = evaluate(&best, dataset, &split.val_indices, &p.eval)?;
                cells.push(SweepCell {
                    lambda,
                    mode,
                    seed,
                    sa: out.report.sa,
                    ra: out.report.ra,
                });
            }
        }
    }
    Ok(SweepTable { cells })
}

/// Write two-column numeric plot data.
pub fn write_plot_data(path: &Path, pairs: &[(f64, f64)]) -> Result<()> {
    let mut s = String::new();
    for (x, y) in pairs {
        s.push_str(&format!("{x} {y:.6}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}
