//! Adversarial training of the robust classifier.
//!
//! The composite objective is CE(f(x), ŷ) + β·KL(f(x) ‖ f(x')), with ŷ
//! built from the current pseudo-label snapshot (rectified, hard, or
//! soft per the target strategy), x' from the KL inner maximization, and
//! both probabilities taken through softmax. KL direction is
//! clean-as-first-argument; gradients flow through both branches. A
//! hard-label arm (CE on adversarial examples against argmax pseudo
//! labels, no consistency term) exists as the basic robust-self-training
//! baseline.

use std::sync::Arc;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackSpec};
use crate::data::{AugmentationPolicy, Dataset, SSLSplit};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, CheckpointMeta};
use crate::model::convnet::{ArchSpec, ConvNet, GradWants};
use crate::model::math;
use crate::model::optimizer::{LrSchedule, SgdConfig, SgdState};
use crate::model::{scalar, LabelDistribution, Scalar};
use crate::nar::{self, NARConfig};
use crate::rng::{derive_rng, mix, tag};
use crate::ssl::PseudoLabelSnapshot;

/// How training targets are built from the snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStrategy {
    /// Rectified targets: labeled fuse with ground truth, unlabeled with
    /// a sampled (or argmax) anchor, composite loss.
    Snord,
    /// One-hot targets (ground truth / argmax pseudo label), composite
    /// loss. This is the rectification-off ablation arm.
    HardPseudo,
    /// Raw distributions as targets for unlabeled data, composite loss.
    SoftDistill,
    /// Basic robust self-training: CE on adversarial examples against
    /// one-hot targets, no consistency term.
    HardLabelRst,
}

/// Robust-stage hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustTrainConfig {
    /// Weight β of the KL consistency term.
    pub beta: f64,
    /// Training attack (also drives the KL inner maximization).
    pub attack: AttackSpec,
    /// Validation attack; defaults to the training attack.
    pub val_attack: Option<AttackSpec>,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// Piecewise schedule: decay by `lr_decay` at these epoch fractions.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub strategy: TargetStrategy,
    pub nar: NARConfig,
    /// Evaluate the CE term on x' instead of x (deviation arm).
    pub ce_on_adversarial: bool,
    pub weak: AugmentationPolicy,
    pub seed: u64,
}

impl RobustTrainConfig {
    /// Reference hyperparameters: β = 6, ε = 8/255 with 10 steps of
    /// 2/255, SGD lr 0.1 / momentum 0.9 / weight decay 5e-4, decay 0.1
    /// at 50% and 75% of epochs, λ = 0.5 sampling rectification.
    pub fn reference(total_epochs: usize, seed: u64) -> Self {
        Self {
            beta: 6.0,
            attack: AttackSpec::train_default(),
            val_attack: None,
            total_epochs,
            batch_size: 64,
            optimizer: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                nesterov: false,
                weight_decay: 5e-4,
            },
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            strategy: TargetStrategy::Snord,
            nar: NARConfig {
                lambda: 0.5,
                unlabeled_mode: nar::UnlabeledMode::Sample,
                resample_each_epoch: true,
                seed,
            },
            ce_on_adversarial: false,
            weak: AugmentationPolicy::weak(1, 0.5, 0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("total_epochs and batch_size must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay must be in (0, 1]"));
        }
        self.attack.validate()?;
        if let Some(va) = &self.val_attack {
            va.validate()?;
        }
        self.optimizer.validate()?;
        self.nar.validate()
    }

    fn val_attack(&self) -> AttackSpec {
        self.val_attack.unwrap_or(self.attack)
    }
}

/// Loss components of one robust step; `total = ce + beta·kl` exactly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
}

/// Composite loss and its parameter gradient for a prepared batch.
///
/// `x_prime` is the already-generated inner-maximization point; pass
/// `x.clone()` (or set β = 0) to drop the consistency term. Returns the
/// breakdown and the flat parameter gradient of the mean batch loss.
pub fn snord_loss_grads<F: Scalar>(
    model: &ConvNet<F>,
    x: &Array4<F>,
    x_prime: &Array4<F>,
    targets: &Array2<F>,
    beta: f64,
    ce_on_adversarial: bool,
) -> Result<(LossBreakdown, Vec<F>)> {
    let n = x.dim().0;
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let nf = scalar::<F>(n as f64);
    let betaf = scalar::<F>(beta);
    let eps = scalar::<F>(math::EPS_LOG);

    let cache_clean = model.forward_cached(x)?;
    let p_clean = math::softmax_batch(cache_clean.logits());
    let with_kl = beta > 0.0;
    let needs_adv = with_kl || ce_on_adversarial;

    let (cache_adv, p_adv) = if needs_adv {
        let cache = model.forward_cached(x_prime)?;
        let p = math::softmax_batch(cache.logits());
        (Some(cache), Some(p))
    } else {
        (None, None)
    };

    // CE term
    let ce_probs = if ce_on_adversarial {
        p_adv.as_ref().expect("adv pass exists for ce_on_adversarial")
    } else {
        &p_clean
    };
    let ce = math::mean_cross_entropy(ce_probs, targets).to_f64().unwrap();

    // KL term and gradients
    let mut dz_clean = if ce_on_adversarial {
        Array2::<F>::zeros(p_clean.raw_dim())
    } else {
        (&p_clean - targets) / nf
    };
    let mut dz_adv = if needs_adv {
        let mut d = Array2::<F>::zeros(p_clean.raw_dim());
        if ce_on_adversarial {
            d = (p_adv.as_ref().unwrap() - targets) / nf;
        }
        Some(d)
    } else {
        None
    };

    let mut kl = 0.0f64;
    if with_kl {
        let q = p_adv.as_ref().unwrap();
        let da = dz_adv.as_mut().unwrap();
        for i in 0..n {
            let p_row = p_clean.row(i);
            let q_row = q.row(i);
            // u = log p − log q (clamped); KL = Σ p·u
            let mut dot = F::zero();
            let mut kl_i = F::zero();
            let u: Vec<F> = p_row
                .iter()
                .zip(q_row.iter())
                .map(|(&pi, &qi)| pi.max(eps).ln() - qi.max(eps).ln())
                .collect();
            for (j, &ui) in u.iter().enumerate() {
                if p_row[j] != F::zero() {
                    kl_i += p_row[j] * ui;
                }
                dot += p_row[j] * ui;
            }
            kl += kl_i.to_f64().unwrap();
            let scale = betaf / nf;
            for j in 0..p_row.len() {
                // d(KL)/dz_clean = p ⊙ (u − ⟨p, u⟩)
                dz_clean[[i, j]] += scale * p_row[j] * (u[j] - dot);
                // d(KL)/dz_adv = q − p
                da[[i, j]] += scale * (q_row[j] - p_row[j]);
            }
        }
        kl /= n as f64;
    }

    let total = ce + beta * kl;
    if !total.is_finite() {
        return Err(Error::invalid(format!("non-finite robust loss: ce {ce}, kl {kl}")));
    }

    let wants = GradWants {
        params: true,
        input: false,
    };
    let mut grad = model
        .backward_batch(&cache_clean, &dz_clean, wants)
        .params
        .expect("param grads");
    if let (Some(cache), Some(da)) = (cache_adv.as_ref(), dz_adv.as_ref()) {
        let adv_grad = model.backward_batch(cache, da, wants).params.unwrap();
        for (g, a) in grad.iter_mut().zip(adv_grad) {
            *g += a;
        }
    }
    Ok((LossBreakdown { total, ce, kl }, grad))
}

/// Composite loss at the given batch, generating x' internally with the
/// KL inner maximization. Returns the breakdown and x'.
pub fn snord_loss<F: Scalar>(
    model: &ConvNet<F>,
    x: &Array4<F>,
    targets: &Array2<F>,
    beta: f64,
    attack: &AttackSpec,
    attack_seed: u64,
    example_keys: Option<&[u64]>,
    ce_on_adversarial: bool,
) -> Result<(LossBreakdown, Array4<F>)> {
    let x_prime = if beta > 0.0 || ce_on_adversarial {
        attacks::kl_pgd(model, x, attack, attack_seed, example_keys)?.x_adv
    } else {
        x.clone()
    };
    let (breakdown, _) = snord_loss_grads(model, x, &x_prime, targets, beta, ce_on_adversarial)?;
    Ok((breakdown, x_prime))
}

/// Hard-label baseline loss and gradient: CE on CE-PGD adversarial
/// examples against one-hot targets. No consistency term; β is unused.
pub fn baseline_hard_label_grads<F: Scalar>(
    model: &ConvNet<F>,
    x_adv: &Array4<F>,
    targets: &Array2<F>,
) -> Result<(LossBreakdown, Vec<F>)> {
    let n = x_adv.dim().0;
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let cache = model.forward_cached(x_adv)?;
    let probs = math::softmax_batch(cache.logits());
    let ce = math::mean_cross_entropy(&probs, targets).to_f64().unwrap();
    if !ce.is_finite() {
        return Err(Error::invalid(format!("non-finite baseline loss {ce}")));
    }
    let dlogits = (&probs - targets) / scalar::<F>(n as f64);
    let grad = model
        .backward_batch(
            &cache,
            &dlogits,
            GradWants {
                params: true,
                input: false,
            },
        )
        .params
        .expect("param grads");
    Ok((
        LossBreakdown {
            total: ce,
            ce,
            kl: 0.0,
        },
        grad,
    ))
}

/// Per-epoch robust-stage metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustEpochMetrics {
    pub epoch: usize,
    pub train_ce: f64,
    pub train_kl: f64,
    pub train_total: f64,
    pub sa_val: f64,
    pub ra_val: f64,
    pub snapshot_id: u64,
    pub lr: f64,
}

/// Outcome of a robust training run.
pub struct RobustRunResult {
    /// Model state from the epoch with the highest validation robust
    /// accuracy (earliest on ties).
    pub best_params: Vec<f32>,
    pub best_epoch: usize,
    pub best_ra: f64,
    pub final_model: ConvNet<f32>,
    pub history: Vec<RobustEpochMetrics>,
}

/// Serves the label snapshot the robust trainer should use for an epoch.
/// The online-distillation scheduler implements this; a static provider
/// pins the initial snapshot forever.
pub trait SnapshotProvider {
    fn before_epoch(&mut self, robust_epoch: usize) -> Result<Arc<PseudoLabelSnapshot>>;
}

/// Two-stage fallback: the snapshot taken before robust training starts
/// is never refreshed.
pub struct StaticSnapshotProvider(pub Arc<PseudoLabelSnapshot>);

impl SnapshotProvider for StaticSnapshotProvider {
    fn before_epoch(&mut self, _robust_epoch: usize) -> Result<Arc<PseudoLabelSnapshot>> {
        Ok(Arc::clone(&self.0))
    }
}

/// Single-writer adversarial training loop.
pub struct RobustTrainer {
    model: ConvNet<f32>,
    opt: SgdState<f32>,
    config: RobustTrainConfig,
    dataset: Arc<Dataset>,
    split: SSLSplit,
    pool: Vec<usize>,
    epoch: usize,
    steps_per_epoch: usize,
    best_ra: f64,
    best_epoch: usize,
    best_params: Vec<f32>,
    weak: AugmentationPolicy,
}

impl RobustTrainer {
    pub fn new(
        dataset: Arc<Dataset>,
        split: &SSLSplit,
        arch: ArchSpec,
        config: RobustTrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let model = ConvNet::new(arch, mix(config.seed, &[tag::INIT, 0xb0b]))?;
        Self::from_model(dataset, split, model, config, 0, 0)
    }

    pub fn resume(
        dataset: Arc<Dataset>,
        split: &SSLSplit,
        config: RobustTrainConfig,
        ck: &Checkpoint<f32>,
        best: Option<(f64, usize, Vec<f32>)>,
    ) -> Result<Self> {
        let model = ConvNet::from_params(ck.meta.arch.clone(), ck.params.clone())?;
        let mut t =
            Self::from_model(dataset, split, model, config, ck.meta.epoch, ck.meta.opt_steps)?;
        t.opt.velocity.copy_from_slice(&ck.velocity);
        t.opt.steps = ck.meta.opt_steps;
        if let Some((ra, ep, params)) = best {
            t.best_ra = ra;
            t.best_epoch = ep;
            t.best_params = params;
        }
        Ok(t)
    }

    fn from_model(
        dataset: Arc<Dataset>,
        split: &SSLSplit,
        model: ConvNet<f32>,
        config: RobustTrainConfig,
        epoch: usize,
        opt_steps: u64,
    ) -> Result<Self> {
        let pool = split.pool_indices();
        if pool.is_empty() {
            return Err(Error::config("robust training needs a non-empty pool"));
        }
        let steps_per_epoch = (pool.len() + config.batch_size - 1) / config.batch_size;
        let mut opt = SgdState::new(model.num_params());
        opt.steps = opt_steps;
        let weak = config.weak.clone().with_seed(config.seed);
        let best_params = model.params().to_vec();
        Ok(Self {
            model,
            opt,
            config,
            dataset,
            split: split.clone(),
            pool,
            epoch,
            steps_per_epoch,
            best_ra: f64::NEG_INFINITY,
            best_epoch: 0,
            best_params,
            weak,
        })
    }

    pub fn model(&self) -> &ConvNet<f32> {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &RobustTrainConfig {
        &self.config
    }

    pub fn best(&self) -> (f64, usize, &[f32]) {
        (self.best_ra, self.best_epoch, &self.best_params)
    }

    fn lr_now(&self) -> f64 {
        let schedule = LrSchedule::Piecewise {
            total_steps: (self.config.total_epochs * self.steps_per_epoch) as u64,
            milestones: self.config.lr_milestones.clone(),
            factor: self.config.lr_decay,
        };
        schedule.at(self.config.optimizer.lr, self.opt.steps)
    }

    /// Assemble ŷ rows for a batch from the snapshot under the
    /// configured strategy. A single λ feeds both branches.
    fn build_targets(
        &self,
        batch: &[usize],
        snapshot: &PseudoLabelSnapshot,
    ) -> Result<Array2<f32>> {
        let num_classes = self.dataset.num_classes();
        let mut targets = Array2::<f32>::zeros((batch.len(), num_classes));
        let nar_epoch = if self.config.nar.resample_each_epoch {
            self.epoch
        } else {
            snapshot.epoch
        };
        for (bi, &idx) in batch.iter().enumerate() {
            let p = snapshot.distribution(idx)?;
            let labeled = self.split.is_labeled(idx);
            let row: LabelDistribution = match self.config.strategy {
                TargetStrategy::Snord => {
                    if labeled {
                        let y = LabelDistribution::one_hot(self.dataset.label(idx), num_classes)?;
                        nar::rectify_labeled(&p, &y, self.config.nar.lambda)?.y_hat
                    } else {
                        let mut rng = self.config.nar.sampling_rng(nar_epoch, idx);
                        nar::rectify_unlabeled(&p, &self.config.nar, &mut rng)?.y_hat
                    }
                }
                TargetStrategy::HardPseudo | TargetStrategy::HardLabelRst => {
                    let cls = if labeled {
                        self.dataset.label(idx)
                    } else {
                        p.argmax()
                    };
                    LabelDistribution::one_hot(cls, num_classes)?
                }
                TargetStrategy::SoftDistill => {
                    if labeled {
                        LabelDistribution::one_hot(self.dataset.label(idx), num_classes)?
                    } else {
                        p
                    }
                }
            };
            targets.row_mut(bi).assign(row.probs());
        }
        Ok(targets)
    }

    fn check_attack_bound(&self, x: &Array4<f32>, x_adv: &Array4<f32>) -> Result<()> {
        let eps = self.config.attack.epsilon;
        let max = (x_adv - x).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if max as f64 > eps + 1e-6 {
            return Err(Error::invalid(format!(
                "attack produced ‖δ‖∞ = {max} > ε = {eps}"
            )));
        }
        if x_adv.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("adversarial example outside [0, 1]"));
        }
        Ok(())
    }

    /// One optimizer step on a prepared batch.
    fn step(
        &mut self,
        batch: &[usize],
        snapshot: &PseudoLabelSnapshot,
        batch_id: u64,
    ) -> Result<LossBreakdown> {
        let x = self
            .dataset
            .gather_augmented(batch, &self.weak, self.epoch)?;
        let targets = self.build_targets(batch, snapshot)?;
        let keys: Vec<u64> = batch.iter().map(|&i| i as u64).collect();
        let attack_seed = mix(self.config.seed, &[tag::ATTACK, self.epoch as u64, batch_id]);

        let (breakdown, grad) = match self.config.strategy {
            TargetStrategy::HardLabelRst => {
                let out = attacks::pgd(
                    &self.model,
                    &x,
                    Some(&targets),
                    &self.config.attack,
                    attack_seed,
                    Some(&keys),
                )?;
                self.check_attack_bound(&x, &out.x_adv)?;
                baseline_hard_label_grads(&self.model, &out.x_adv, &targets)?
            }
            _ => {
                let beta = self.config.beta;
                let x_prime = if beta > 0.0 || self.config.ce_on_adversarial {
                    let out = attacks::kl_pgd(
                        &self.model,
                        &x,
                        &self.config.attack,
                        attack_seed,
                        Some(&keys),
                    )?;
                    self.check_attack_bound(&x, &out.x_adv)?;
                    out.x_adv
                } else {
                    x.clone()
                };
                snord_loss_grads(
                    &self.model,
                    &x,
                    &x_prime,
                    &targets,
                    beta,
                    self.config.ce_on_adversarial,
                )?
            }
        };

        if !breakdown.total.is_finite() {
            return Err(Error::Diverged {
                stage: "robust",
                epoch: self.epoch,
                detail: format!("loss {:?}", breakdown),
            });
        }
        let lr = self.lr_now();
        self.opt
            .step(&self.config.optimizer, lr, self.model.params_mut(), &grad)?;
        Ok(breakdown)
    }

    /// Train one epoch against a fixed snapshot, then evaluate on the
    /// validation slice and update the best-checkpoint tracker.
    pub fn run_epoch(&mut self, snapshot: &PseudoLabelSnapshot) -> Result<RobustEpochMetrics> {
        let mut order = self.pool.clone();
        let mut rng = derive_rng(
            self.config.seed,
            &[tag::BATCH_ORDER, 0x0b, self.epoch as u64],
        );
        order.shuffle(&mut rng);

        let lr_at_start = self.lr_now();
        let mut ce_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut steps = 0usize;
        for (bi, batch) in order.chunks(self.config.batch_size).enumerate() {
            let b = self.step(batch, snapshot, bi as u64)?;
            ce_sum += b.ce;
            kl_sum += b.kl;
            steps += 1;
        }
        self.epoch += 1;

        let val = attacks::evaluate_robust_accuracy(
            &self.model,
            &self.dataset,
            &self.split.val_indices,
            &self.config.val_attack(),
            mix(self.config.seed, &[tag::EVAL, 0xa1, self.epoch as u64]),
        )?;
        if val.robust_accuracy > self.best_ra {
            self.best_ra = val.robust_accuracy;
            self.best_epoch = self.epoch;
            self.best_params = self.model.params().to_vec();
        }

        let train_ce = ce_sum / steps as f64;
        let train_kl = kl_sum / steps as f64;
        Ok(RobustEpochMetrics {
            epoch: self.epoch,
            train_ce,
            train_kl,
            train_total: train_ce + self.config.beta * train_kl,
            sa_val: val.standard_accuracy,
            ra_val: val.robust_accuracy,
            snapshot_id: snapshot.id,
            lr: lr_at_start,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            meta: CheckpointMeta {
                dtype: "f32".into(),
                arch: self.model.arch().clone(),
                epoch: self.epoch,
                opt_steps: self.opt.steps,
                seed: self.config.seed,
                stage: "robust".into(),
            },
            params: self.model.params().to_vec(),
            velocity: self.opt.velocity.clone(),
        }
    }
}

/// Full robust run: `total_epochs` epochs with snapshots served by the
/// provider. The returned checkpoint maximizes validation robust
/// accuracy (earliest epoch on ties).
pub fn train_robust(
    dataset: Arc<Dataset>,
    split: &SSLSplit,
    arch: ArchSpec,
    config: RobustTrainConfig,
    provider: &mut dyn SnapshotProvider,
) -> Result<RobustRunResult> {
    let mut trainer = RobustTrainer::new(dataset, split, arch, config)?;
    let mut history = Vec::with_capacity(trainer.config.total_epochs);
    for e in 0..trainer.config.total_epochs {
        let snapshot = provider.before_epoch(e)?;
        history.push(trainer.run_epoch(&snapshot)?);
    }
    let (best_ra, best_epoch, best_params) = trainer.best();
    Ok(RobustRunResult {
        best_params: best_params.to_vec(),
        best_epoch,
        best_ra,
        final_model: trainer.model,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_ssl_split, SyntheticSpec};
    use crate::ssl::snapshot_pseudo_labels;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use rand::Rng;

    fn setup(seed: u64) -> (Arc<Dataset>, SSLSplit, Arc<PseudoLabelSnapshot>) {
        let ds = Arc::new(SyntheticSpec::tiny(seed).generate().unwrap());
        let split = make_ssl_split(ds.len(), ds.num_classes(), ds.labels(), 0.25, seed).unwrap();
        let gen = ConvNet::new(
            ArchSpec::conv_blocks(ds.image_shape(), &[4], ds.num_classes()),
            seed,
        )
        .unwrap();
        let snap = snapshot_pseudo_labels(
            &gen,
            &ds,
            &split.pool_indices(),
            &AugmentationPolicy::identity(),
            0,
            0,
        )
        .unwrap();
        (ds, split, Arc::new(snap))
    }

    fn small_config(seed: u64) -> RobustTrainConfig {
        let mut cfg = RobustTrainConfig::reference(2, seed);
        cfg.batch_size = 16;
        cfg.attack.num_steps = 3;
        cfg
    }

    #[test]
    fn beta_zero_reduces_to_ce() {
        let (ds, _, _) = setup(1);
        let arch = ArchSpec::conv_blocks(ds.image_shape(), &[4], ds.num_classes());
        let model = ConvNet::<f32>::new(arch, 3).unwrap();
        let x = ds.gather(&[0, 1, 2, 3]).unwrap();
        let labels: Vec<usize> = (0..4).map(|i| ds.label(i)).collect();
        let targets = math::one_hot_batch::<f32>(&labels, ds.num_classes()).unwrap();
        let (b, x_prime) = snord_loss(
            &model,
            &x,
            &targets,
            0.0,
            &AttackSpec::train_default(),
            0,
            None,
            false,
        )
        .unwrap();
        assert_eq!(x_prime, x);
        assert_eq!(b.kl, 0.0);
        assert_abs_diff_eq!(b.total, b.ce, epsilon = 1e-15);
    }

    #[test]
    fn zero_epsilon_kills_kl_term() {
        let (ds, _, _) = setup(2);
        let arch = ArchSpec::conv_blocks(ds.image_shape(), &[4], ds.num_classes());
        let model = ConvNet::<f32>::new(arch, 5).unwrap();
        let x = ds.gather(&[0, 1, 2]).unwrap();
        let labels: Vec<usize> = (0..3).map(|i| ds.label(i)).collect();
        let targets = math::one_hot_batch::<f32>(&labels, ds.num_classes()).unwrap();
        let spec = AttackSpec::train_default().with_epsilon(0.0);
        let (b, x_prime) = snord_loss(&model, &x, &targets, 6.0, &spec, 0, None, false).unwrap();
        assert_eq!(x_prime, x);
        assert_abs_diff_eq!(b.kl, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.total, b.ce, epsilon = 1e-12);
    }

    #[test]
    fn breakdown_matches_independent_recomputation() {
        let (ds, _, _) = setup(3);
        let arch = ArchSpec::conv_blocks(ds.image_shape(), &[4], ds.num_classes());
        let model = ConvNet::<f32>::new(arch, 7).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let x = ds.gather(&idx).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
        let targets = math::one_hot_batch::<f32>(&labels, ds.num_classes()).unwrap();
        let beta = 6.0;
        let spec = AttackSpec {
            num_steps: 5,
            ..AttackSpec::train_default()
        };
        let (b, x_prime) = snord_loss(&model, &x, &targets, beta, &spec, 11, None, false).unwrap();
        // standalone recomputation with the scalar primitives
        let p = math::softmax_batch(&model.forward_batch(&x));
        let q = math::softmax_batch(&model.forward_batch(&x_prime));
        let mut ce = 0.0;
        let mut kl = 0.0;
        for i in 0..idx.len() {
            ce += math::cross_entropy(
                p.row(i).as_slice().unwrap(),
                targets.row(i).as_slice().unwrap(),
            ) as f64;
            kl += math::kl_divergence(p.row(i).as_slice().unwrap(), q.row(i).as_slice().unwrap())
                as f64;
        }
        ce /= idx.len() as f64;
        kl /= idx.len() as f64;
        assert_abs_diff_eq!(b.ce, ce, epsilon = 1e-6);
        assert_abs_diff_eq!(b.kl, kl, epsilon = 1e-6);
        assert_abs_diff_eq!(b.total, ce + beta * kl, epsilon = 1e-6);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        // f64 model, fixed x and x'; probe d(total)/dθ against central
        // differences of an independent scalar evaluation.
        let arch = ArchSpec::conv_blocks([1, 6, 6], &[3], 3);
        let mut model = ConvNet::<f64>::new(arch, 17).unwrap();
        let mut rng = derive_rng(23, &[1]);
        let x = Array4::from_shape_fn((3, 1, 6, 6), |_| rng.gen_range(0.0..1.0));
        let x_prime = x.mapv(|v: f64| (v + 0.02).min(1.0));
        let targets = math::one_hot_batch::<f64>(&[0, 1, 2], 3).unwrap();
        let beta = 4.0;
        let (_, grad) =
            snord_loss_grads(&model, &x, &x_prime, &targets, beta, false).unwrap();
        let scalar_loss = |m: &ConvNet<f64>| -> f64 {
            let p = math::softmax_batch(&m.forward_batch(&x));
            let q = math::softmax_batch(&m.forward_batch(&x_prime));
            let mut ce = 0.0;
            let mut kl = 0.0;
            for i in 0..3 {
                ce += math::cross_entropy(
                    p.row(i).as_slice().unwrap(),
                    targets.row(i).as_slice().unwrap(),
                );
                kl += math::kl_divergence(
                    p.row(i).as_slice().unwrap(),
                    q.row(i).as_slice().unwrap(),
                );
            }
            (ce + beta * kl) / 3.0
        };
        let h = 1e-6;
        let total = model.num_params();
        for &pi in &[0usize, total / 4, total / 2, 3 * total / 4, total - 1] {
            let orig = model.params()[pi];
            model.params_mut()[pi] = orig + h;
            let lp = scalar_loss(&model);
            model.params_mut()[pi] = orig - h;
            let lm = scalar_loss(&model);
            model.params_mut()[pi] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[pi].abs().max(fd.abs()).max(1e-8);
            assert!(
                (grad[pi] - fd).abs() / denom < 1e-4,
                "param {pi}: analytic {} vs fd {fd}",
                grad[pi]
            );
        }
    }

    #[test]
    fn baseline_ignores_beta_and_has_no_kl() {
        let (ds, split, snap) = setup(4);
        let arch = ArchSpec::conv_blocks(ds.image_shape(), &[4], ds.num_classes());
        for beta in [0.0, 6.0] {
            let mut cfg = small_config(4);
            cfg.beta = beta;
            cfg.strategy = TargetStrategy::HardLabelRst;
            let mut t = RobustTrainer::new(ds.clone(), &split, arch.clone(), cfg).unwrap();
            let m = t.run_epoch(&snap).unwrap();
            assert_eq!(m.train_kl, 0.0, "baseline must not report a KL term");
            // and the trajectory is β-independent: same loss for both runs
            if beta == 0.0 {
                continue;
            }
            let mut cfg0 = small_config(4);
            cfg0.beta = 0.0;
            cfg0.strategy = TargetStrategy::HardLabelRst;
            let mut t0 = RobustTrainer::new(ds.clone(), &split, arch.clone(), cfg0).unwrap();
            let m0 = t0.run_epoch(&snap).unwrap();
            assert_eq!(m.train_ce, m0.train_ce);
            assert_eq!(t.model().params(), t0.model().params());
        }
    }

    #[test]
    fn strategies_differ_only_via_targets() {
        // With λ = 0 in sample mode, rectified labeled targets equal the
        // one-hot ground truth; unlabeled targets are sampled one-hots
        // rather than argmax, so the two strategies' target tensors
        // differ only on unlabeled rows where the draw disagrees.
        let (ds, split, snap) = setup(5);
        let arch = ArchSpec::conv_blocks(ds.image_shape(), &[4], ds.num_classes());
        let mut cfg = small_config(5);
        cfg.nar.lambda = 0.0;
        let t = RobustTrainer::new(ds.clone(), &split, arch.clone(), cfg.clone()).unwrap();
        let mut cfg_hard = cfg.clone();
        cfg_hard.strategy = TargetStrategy::HardPseudo;
        let t_hard = RobustTrainer::new(ds, &split, arch, cfg_hard).unwrap();
        let batch: Vec<usize> = split
            .labeled_indices
            .iter()
            .take(4)
            .chain(split.unlabeled_indices.iter().take(4))
            .copied()
            .collect();
        let a = t.build_targets(&batch, &snap).unwrap();
        let b = t_hard.build_targets(&batch, &snap).unwrap();
        for bi in 0..4 {
            assert_eq!(a.row(bi), b.row(bi), "labeled rows must agree at λ = 0");
        }
        for bi in 4..8 {
            // both one-hot; classes may differ (sample vs argmax)
            assert!(a.row(bi).iter().filter(|&&v| v == 1.0).count() == 1);
            assert!(b.row(bi).iter().filter(|&&v| v == 1.0).count() == 1);
        }
    }

    #[test]
    fn training_is_deterministic_and_tracks_best() {
        let (ds, split, snap) = setup(6);
        let arch = ArchSpec::conv_blocks(ds.image_shape(), &[4], ds.num_classes());
        let mut p1 = StaticSnapshotProvider(snap.clone());
        let r1 = train_robust(ds.clone(), &split, arch.clone(), small_config(6), &mut p1).unwrap();
        let mut p2 = StaticSnapshotProvider(snap);
        let r2 = train_robust(ds, &split, arch, small_config(6), &mut p2).unwrap();
        assert_eq!(r1.final_model.params(), r2.final_model.params());
        assert_eq!(r1.best_epoch, r2.best_epoch);
        // best epoch is the argmax of the recorded series (earliest tie)
        let mut best = (f64::NEG_INFINITY, 0usize);
        for m in &r1.history {
            if m.ra_val > best.0 {
                best = (m.ra_val, m.epoch);
            }
        }
        assert_eq!(r1.best_epoch, best.1);
        assert_abs_diff_eq!(r1.best_ra, best.0, epsilon = 1e-12);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (ds, split, snap) = setup(8);
        let arch = ArchSpec::conv_blocks(ds.image_shape(), &[4], ds.num_classes());
        let cfg = small_config(8);
        let mut full = RobustTrainer::new(ds.clone(), &split, arch.clone(), cfg.clone()).unwrap();
        full.run_epoch(&snap).unwrap();
        full.run_epoch(&snap).unwrap();

        let mut half = RobustTrainer::new(ds.clone(), &split, arch, cfg.clone()).unwrap();
        half.run_epoch(&snap).unwrap();
        let ck = half.checkpoint();
        let (ra, ep, params) = half.best();
        let best = Some((ra, ep, params.to_vec()));
        let mut resumed = RobustTrainer::resume(ds, &split, cfg, &ck, best).unwrap();
        resumed.run_epoch(&snap).unwrap();
        assert_eq!(full.model().params(), resumed.model().params());
        assert_eq!(full.best().1, resumed.best().1);
    }

    use crate::rng::derive_rng;
}
