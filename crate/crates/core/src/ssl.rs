//! Pseudo-label generator trained with a confidence-thresholded
//! semi-supervised objective.
//!
//! Each step takes a labeled batch of size B and an unlabeled batch of
//! size μ·B. Labeled examples contribute CE on their weak view against
//! ground truth. Unlabeled examples contribute CE on their strong view
//! against the argmax pseudo label of their weak view, but only where the
//! weak-view confidence reaches τ; the unsupervised term is normalized by
//! μ·B regardless of how many pass. Unsupervised weight is fixed at 1.
//!
//! The trainer advances epoch by epoch so the online-distillation
//! scheduler can drive it incrementally, and it serves frozen per-epoch
//! label snapshots to the robust stage.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentationPolicy, Dataset, SSLSplit};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, CheckpointMeta};
use crate::model::convnet::{ArchSpec, ConvNet, GradWants};
use crate::model::math;
use crate::model::optimizer::{LrSchedule, SgdConfig, SgdState};
use crate::model::{Classifier, LabelDistribution};
use crate::rng::{derive_rng, tag};

/// Generator training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SSLTrainerConfig {
    /// Confidence threshold τ for the unsupervised term.
    pub tau: f64,
    /// Unlabeled-to-labeled batch ratio μ.
    pub mu: usize,
    /// Labeled batch size B.
    pub batch_size_labeled: usize,
    pub optimizer: SgdConfig,
    /// Planned epoch budget; the cosine schedule spans it.
    pub total_epochs: usize,
    /// Steps per epoch; defaults to covering the pool once per epoch
    /// across both streams.
    pub steps_per_epoch: Option<usize>,
    pub weak: AugmentationPolicy,
    pub strong: AugmentationPolicy,
    pub seed: u64,
}

impl SSLTrainerConfig {
    /// Reference hyperparameters: τ = 0.95, μ = 5, B = 64, SGD with
    /// lr 0.03, momentum 0.9, Nesterov, weight decay 1e-3, cosine decay.
    pub fn reference(total_epochs: usize, seed: u64) -> Self {
        Self {
            tau: 0.95,
            mu: 5,
            batch_size_labeled: 64,
            optimizer: SgdConfig {
                lr: 0.03,
                momentum: 0.9,
                nesterov: true,
                weight_decay: 1e-3,
            },
            total_epochs,
            steps_per_epoch: None,
            weak: AugmentationPolicy::weak(1, 0.5, 0),
            strong: AugmentationPolicy::strong(0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.mu == 0 {
            return Err(Error::config("mu must be at least 1"));
        }
        if self.batch_size_labeled == 0 {
            return Err(Error::config("batch_size_labeled must be at least 1"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be at least 1"));
        }
        self.optimizer.validate()
    }
}

/// Loss components of one generator step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SslStepOutcome {
    pub supervised: f64,
    pub unsupervised: f64,
    /// Fraction of the unlabeled batch passing the confidence threshold.
    pub mask_rate: f64,
}

/// Per-epoch generator metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenEpochMetrics {
    pub epoch: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub mask_rate: f64,
    /// Argmax pseudo-label error on the unlabeled set against hidden
    /// ground truth (analysis metric; trainers never see these labels).
    pub pseudo_label_error: f64,
    pub lr: f64,
}

/// Frozen map from pool example index to its estimated label
/// distribution. Immutable once built.
#[derive(Debug, Clone)]
pub struct PseudoLabelSnapshot {
    pub id: u64,
    /// Generator epoch the snapshot was taken at.
    pub epoch: usize,
    indices: Vec<usize>,
    probs: Array2<f32>,
    lookup: Vec<Option<u32>>,
}

impl PseudoLabelSnapshot {
    pub fn new(id: u64, epoch: usize, indices: Vec<usize>, probs: Array2<f32>) -> Result<Self> {
        if indices.len() != probs.nrows() {
            return Err(Error::shape(
                format!("{} probability rows", indices.len()),
                format!("{}", probs.nrows()),
            ));
        }
        let max_idx = indices.iter().copied().max().unwrap_or(0);
        let mut lookup = vec![None; max_idx + 1];
        for (row, &idx) in indices.iter().enumerate() {
            if lookup[idx].is_some() {
                return Err(Error::invalid(format!("duplicate snapshot index {idx}")));
            }
            lookup[idx] = Some(row as u32);
        }
        Ok(Self {
            id,
            epoch,
            indices,
            probs,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn probs_for(&self, index: usize) -> Result<ArrayView1<'_, f32>> {
        let row = self
            .lookup
            .get(index)
            .copied()
            .flatten()
            .ok_or(Error::IndexOutOfRange(index))?;
        Ok(self.probs.row(row as usize))
    }

    pub fn distribution(&self, index: usize) -> Result<LabelDistribution> {
        LabelDistribution::try_new(self.probs_for(index)?.to_owned())
    }

    /// SHA-256 over id-independent content (indices and probabilities);
    /// stable within a refresh window.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.indices.len() as u64).to_le_bytes());
        for &i in &self.indices {
            h.update((i as u64).to_le_bytes());
        }
        for v in self.probs.iter() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header {
            id: u64,
            epoch: usize,
            count: usize,
            num_classes: usize,
        }
        let header = serde_json::to_vec(&Header {
            id: self.id,
            epoch: self.epoch,
            count: self.indices.len(),
            num_classes: self.num_classes(),
        })?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(b"SNPLSS01")?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for &i in &self.indices {
            out.write_all(&(i as u64).to_le_bytes())?;
        }
        for v in self.probs.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            id: u64,
            epoch: usize,
            count: usize,
            num_classes: usize,
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fail = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        };
        if bytes.len() < 16 || &bytes[..8] != b"SNPLSS01" {
            return Err(fail("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(
            bytes.get(16..16 + hlen).ok_or_else(|| fail("truncated header"))?,
        )?;
        let mut off = 16 + hlen;
        let need = header.count * 8 + header.count * header.num_classes * 4;
        if bytes.len() != off + need {
            return Err(fail("payload size mismatch"));
        }
        let mut indices = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            indices.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
            off += 8;
        }
        let mut flat = Vec::with_capacity(header.count * header.num_classes);
        for chunk in bytes[off..].chunks_exact(4) {
            flat.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let probs = Array2::from_shape_vec((header.count, header.num_classes), flat)
            .map_err(|e| fail(&format!("probs reshape: {e}")))?;
        Self::new(header.id, header.epoch, indices, probs)
    }
}

/// Fraction of `subset` whose snapshot argmax differs from the hidden
/// true label. Ties break to the lowest class index.
pub fn pseudo_label_error_rate(
    snapshot: &PseudoLabelSnapshot,
    true_labels: &[usize],
    subset: &[usize],
) -> Result<f64> {
    if subset.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    for &i in subset {
        let row = snapshot.probs_for(i)?;
        if i >= true_labels.len() {
            return Err(Error::IndexOutOfRange(i));
        }
        if math::argmax(row.as_slice().unwrap()) != true_labels[i] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / subset.len() as f64)
}

/// Estimated label distributions for every pool example at a given
/// generator epoch, from weakly augmented views.
pub fn snapshot_pseudo_labels(
    generator: &ConvNet<f32>,
    dataset: &Dataset,
    pool_indices: &[usize],
    weak: &AugmentationPolicy,
    epoch: usize,
    id: u64,
) -> Result<PseudoLabelSnapshot> {
    let mut probs = Array2::zeros((pool_indices.len(), generator.num_classes()));
    const CHUNK: usize = 256;
    for (ci, chunk) in pool_indices.chunks(CHUNK).enumerate() {
        let x = dataset.gather_augmented(chunk, weak, epoch)?;
        let logits = generator.forward_batch(&x);
        let sm = math::softmax_batch(&logits);
        probs
            .slice_mut(ndarray::s![ci * CHUNK..ci * CHUNK + chunk.len(), ..])
            .assign(&sm);
    }
    PseudoLabelSnapshot::new(id, epoch, pool_indices.to_vec(), probs)
}

/// Semi-supervised trainer for the pseudo-label generator.
pub struct GeneratorTrainer {
    model: ConvNet<f32>,
    opt: SgdState<f32>,
    config: SSLTrainerConfig,
    dataset: Arc<Dataset>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    epoch: usize,
    global_step: u64,
    total_steps: u64,
    weak: AugmentationPolicy,
    strong: AugmentationPolicy,
}

impl GeneratorTrainer {
    pub fn new(
        dataset: Arc<Dataset>,
        split: &SSLSplit,
        arch: ArchSpec,
        config: SSLTrainerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let model = ConvNet::new(arch, crate::rng::mix(config.seed, &[tag::INIT, 0x9e]))?;
        Self::from_model(dataset, split, model, config, 0, 0)
    }

    /// Resume from a checkpoint produced by [`Self::checkpoint`].
    pub fn resume(
        dataset: Arc<Dataset>,
        split: &SSLSplit,
        config: SSLTrainerConfig,
        ck: &Checkpoint<f32>,
    ) -> Result<Self> {
        let model = ConvNet::from_params(ck.meta.arch.clone(), ck.params.clone())?;
        let mut t = Self::from_model(dataset, split, model, config, ck.meta.epoch, ck.meta.opt_steps)?;
        t.opt.velocity.copy_from_slice(&ck.velocity);
        t.opt.steps = ck.meta.opt_steps;
        Ok(t)
    }

    fn from_model(
        dataset: Arc<Dataset>,
        split: &SSLSplit,
        model: ConvNet<f32>,
        config: SSLTrainerConfig,
        epoch: usize,
        opt_steps: u64,
    ) -> Result<Self> {
        if split.labeled_indices.is_empty() {
            return Err(Error::config("generator training needs labeled examples"));
        }
        let steps = config
            .steps_per_epoch
            .unwrap_or_else(|| Self::default_steps(&config, split));
        let total_steps = (config.total_epochs * steps) as u64;
        let opt = SgdState::new(model.num_params());
        let weak = config.weak.clone().with_seed(config.seed);
        let strong = config.strong.clone().with_seed(config.seed);
        let mut trainer = Self {
            model,
            opt,
            config,
            dataset,
            labeled: split.labeled_indices.clone(),
            unlabeled: split.unlabeled_indices.clone(),
            epoch,
            global_step: opt_steps,
            total_steps,
            weak,
            strong,
        };
        trainer.opt.steps = opt_steps;
        Ok(trainer)
    }

    fn default_steps(config: &SSLTrainerConfig, split: &SSLSplit) -> usize {
        let pool = split.labeled_indices.len() + split.unlabeled_indices.len();
        let per_step = config.batch_size_labeled * (1 + config.mu);
        (pool + per_step - 1) / per_step
    }

    pub fn model(&self) -> &ConvNet<f32> {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &SSLTrainerConfig {
        &self.config
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or((self.total_steps as usize / self.config.total_epochs).max(1))
    }

    /// Draw this epoch's batch index sequences: reshuffled cycles long
    /// enough to cover `steps` batches.
    fn epoch_sequence(&self, pool: &[usize], want: usize, stream: u64) -> Vec<usize> {
        let mut seq = Vec::with_capacity(want);
        let mut cycle = 0u64;
        while seq.len() < want {
            let mut chunk = pool.to_vec();
            let mut rng = derive_rng(
                self.config.seed,
                &[tag::BATCH_ORDER, stream, self.epoch as u64, cycle],
            );
            chunk.shuffle(&mut rng);
            seq.extend_from_slice(&chunk);
            cycle += 1;
        }
        seq.truncate(want);
        seq
    }

    /// One optimizer step on explicit batches. Empty labeled batches are
    /// rejected; an empty unlabeled batch reduces to supervised training.
    pub fn ssl_step(
        &mut self,
        labeled_batch: &[usize],
        unlabeled_batch: &[usize],
    ) -> Result<SslStepOutcome> {
        if labeled_batch.is_empty() {
            return Err(Error::invalid("empty labeled batch"));
        }
        let b = labeled_batch.len();
        let num_classes = self.dataset.num_classes();

        let x_l = self
            .dataset
            .gather_augmented(labeled_batch, &self.weak, self.epoch)?;
        let y_l: Vec<usize> = labeled_batch.iter().map(|&i| self.dataset.label(i)).collect();
        let targets_l = math::one_hot_batch::<f32>(&y_l, num_classes)?;

        let cache_l = self.model.forward_cached(&x_l)?;
        let probs_l = math::softmax_batch(cache_l.logits());
        let supervised = math::mean_cross_entropy(&probs_l, &targets_l) as f64;
        let dlogits_l = (&probs_l - &targets_l) / b as f32;
        let grads_l = self.model.backward_batch(
            &cache_l,
            &dlogits_l,
            GradWants {
                params: true,
                input: false,
            },
        );
        let mut grad = grads_l.params.expect("param grads requested");

        let mut unsupervised = 0.0f64;
        let mut mask_rate = 0.0f64;
        if !unlabeled_batch.is_empty() {
            let x_uw = self
                .dataset
                .gather_augmented(unlabeled_batch, &self.weak, self.epoch)?;
            let x_us = self
                .dataset
                .gather_augmented(unlabeled_batch, &self.strong, self.epoch)?;
            // weak view: frozen pseudo labels and confidence mask
            let weak_probs = math::softmax_batch(&self.model.forward_batch(&x_uw));
            let mu_b = unlabeled_batch.len();
            let mut pseudo = Array2::<f32>::zeros((mu_b, num_classes));
            let mut mask = vec![false; mu_b];
            let mut passed = 0usize;
            for i in 0..mu_b {
                let row = weak_probs.row(i);
                let cls = math::argmax(row.as_slice().unwrap());
                let conf = row[cls] as f64;
                if conf >= self.config.tau {
                    mask[i] = true;
                    pseudo[[i, cls]] = 1.0;
                    passed += 1;
                }
            }
            mask_rate = passed as f64 / mu_b as f64;
            if passed > 0 {
                let cache_s = self.model.forward_cached(&x_us)?;
                let strong_probs = math::softmax_batch(cache_s.logits());
                let mut dlogits_s = Array2::<f32>::zeros((mu_b, num_classes));
                let mut loss_sum = 0.0f64;
                for i in 0..mu_b {
                    if !mask[i] {
                        continue;
                    }
                    loss_sum += math::cross_entropy_rows(strong_probs.row(i), pseudo.row(i)) as f64;
                    let diff = &strong_probs.row(i) - &pseudo.row(i);
                    dlogits_s.row_mut(i).assign(&(&diff / mu_b as f32));
                }
                unsupervised = loss_sum / mu_b as f64;
                let grads_s = self.model.backward_batch(
                    &cache_s,
                    &dlogits_s,
                    GradWants {
                        params: true,
                        input: false,
                    },
                );
                for (g, gs) in grad.iter_mut().zip(grads_s.params.unwrap()) {
                    *g += gs;
                }
            }
        }

        if !supervised.is_finite() || !unsupervised.is_finite() {
            return Err(Error::Diverged {
                stage: "generator",
                epoch: self.epoch,
                detail: format!("supervised {supervised}, unsupervised {unsupervised}"),
            });
        }
        let schedule = LrSchedule::Cosine {
            total_steps: self.total_steps,
        };
        let lr = schedule.at(self.config.optimizer.lr, self.global_step);
        self.opt
            .step(&self.config.optimizer, lr, self.model.params_mut(), &grad)?;
        self.global_step += 1;
        Ok(SslStepOutcome {
            supervised,
            unsupervised,
            mask_rate,
        })
    }

    /// Train one epoch; returns averaged metrics including the current
    /// pseudo-label error on the unlabeled set.
    pub fn run_epoch(&mut self) -> Result<GenEpochMetrics> {
        let steps = self.steps_per_epoch();
        let b = self.config.batch_size_labeled;
        let mu_b = self.config.mu * b;
        let labeled_seq = self.epoch_sequence(&self.labeled.clone(), steps * b, 0);
        let unlabeled_seq = if self.unlabeled.is_empty() {
            Vec::new()
        } else {
            self.epoch_sequence(&self.unlabeled.clone(), steps * mu_b, 1)
        };

        let mut sup = 0.0;
        let mut unsup = 0.0;
        let mut mask = 0.0;
        for s in 0..steps {
            let lb = &labeled_seq[s * b..(s + 1) * b];
            let ub = if unlabeled_seq.is_empty() {
                &[]
            } else {
                &unlabeled_seq[s * mu_b..(s + 1) * mu_b]
            };
            let out = self.ssl_step(lb, ub)?;
            sup += out.supervised;
            unsup += out.unsupervised;
            mask += out.mask_rate;
        }
        self.epoch += 1;

        let pseudo_label_error = if self.unlabeled.is_empty() {
            0.0
        } else {
            let snap = snapshot_pseudo_labels(
                &self.model,
                &self.dataset,
                &self.unlabeled,
                &AugmentationPolicy::identity(),
                self.epoch,
                0,
            )?;
            pseudo_label_error_rate(&snap, self.dataset.labels(), &self.unlabeled)?
        };
        let schedule = LrSchedule::Cosine {
            total_steps: self.total_steps,
        };
        Ok(GenEpochMetrics {
            epoch: self.epoch,
            supervised: sup / steps as f64,
            unsupervised: unsup / steps as f64,
            mask_rate: mask / steps as f64,
            pseudo_label_error,
            lr: schedule.at(self.config.optimizer.lr, self.global_step.saturating_sub(1)),
        })
    }

    /// Snapshot p(x) for the whole training pool at the current epoch.
    pub fn snapshot(&self, pool_indices: &[usize], id: u64) -> Result<PseudoLabelSnapshot> {
        snapshot_pseudo_labels(
            &self.model,
            &self.dataset,
            pool_indices,
            &self.weak,
            self.epoch,
            id,
        )
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            meta: CheckpointMeta {
                dtype: "f32".into(),
                arch: self.model.arch().clone(),
                epoch: self.epoch,
                opt_steps: self.opt.steps,
                seed: self.config.seed,
                stage: "generator".into(),
            },
            params: self.model.params().to_vec(),
            velocity: self.opt.velocity.clone(),
        }
    }
}

/// Full generator run: `total_epochs` epochs with per-epoch metrics.
pub fn train_generator(
    dataset: Arc<Dataset>,
    split: &SSLSplit,
    arch: ArchSpec,
    config: SSLTrainerConfig,
) -> Result<(GeneratorTrainer, Vec<GenEpochMetrics>)> {
    let mut trainer = GeneratorTrainer::new(dataset, split, arch, config)?;
    let mut metrics = Vec::with_capacity(trainer.config.total_epochs);
    for _ in 0..trainer.config.total_epochs {
        metrics.push(trainer.run_epoch()?);
    }
    Ok((trainer, metrics))
}
