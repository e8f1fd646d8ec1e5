//! Flat run-configuration schema.
//!
//! One documented key set covers every hyperparameter: dataset and split,
//! generator, rectification, attacks, robust stage, refresh schedule, and
//! evaluation. Values load from a TOML file, then `SNORD_<KEY>` environment
//! variables override individual keys (same TOML syntax on the right-hand
//! side). Unknown keys are rejected with the offending field named.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackObjective, AttackSpec};
use crate::data::{arrayfile, make_ssl_split, AugmentationPolicy, Dataset, SSLSplit, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, NoisySnapshotSpec, PipelineParams};
use crate::model::convnet::ArchSpec;
use crate::model::optimizer::SgdConfig;
use crate::nar::{NARConfig, UnlabeledMode};
use crate::ord::ORDSchedule;
use crate::robust::{RobustTrainConfig, TargetStrategy};
use crate::ssl::SSLTrainerConfig;

pub const ENV_PREFIX: &str = "SNORD_";

macro_rules! defaults {
    ($($name:ident: $ty:ty = $value:expr;)*) => {
        $(fn $name() -> $ty { $value })*
    };
}

defaults! {
    d_dataset: String = "synthetic".into();
    d_synthetic_classes: usize = 10;
    d_synthetic_per_class: usize = 550;
    d_synthetic_channels: usize = 1;
    d_synthetic_height: usize = 12;
    d_synthetic_width: usize = 12;
    d_synthetic_noise: f64 = 0.25;
    d_synthetic_translate: usize = 2;
    d_synthetic_brightness: f64 = 0.1;
    d_label_fraction: f64 = 0.1;
    d_seed: u64 = 0;
    d_arch_conv_channels: Vec<usize> = vec![8, 16];
    d_weak_crop_padding: usize = 1;
    d_weak_flip_prob: f64 = 0.5;
    d_tau: f64 = 0.95;
    d_mu: usize = 5;
    d_batch_labeled: usize = 64;
    d_gen_lr: f64 = 0.03;
    d_gen_momentum: f64 = 0.9;
    d_gen_nesterov: bool = true;
    d_gen_weight_decay: f64 = 1e-3;
    d_gen_total_epochs: usize = 30;
    d_gen_steps_per_epoch: usize = 0;
    d_gen_pretrain_epochs: usize = 10;
    d_beta: f64 = 6.0;
    d_lambda: f64 = 0.5;
    d_nar_mode: String = "sample".into();
    d_nar_resample_each_epoch: bool = true;
    d_epsilon: f64 = 8.0 / 255.0;
    d_attack_step_size: f64 = 2.0 / 255.0;
    d_attack_steps: usize = 10;
    d_robust_lr: f64 = 0.1;
    d_robust_momentum: f64 = 0.9;
    d_robust_weight_decay: f64 = 5e-4;
    d_robust_epochs: usize = 15;
    d_robust_batch: usize = 64;
    d_lr_milestones: Vec<f64> = vec![0.5, 0.75];
    d_lr_decay: f64 = 0.1;
    d_strategy: String = "snord".into();
    d_ce_on_adversarial: bool = false;
    d_ord_enabled: bool = true;
    d_ord_period: usize = 5;
    d_ord_gen_ratio: usize = 1;
    d_eval_steps: usize = 20;
    d_eval_restarts_strong: usize = 5;
    d_ablation_seeds: Vec<u64> = vec![0, 1, 2];
    d_sweep_lambdas: Vec<f64> = vec![0.25, 0.375, 0.5];
    d_sweep_noise_error: f64 = 0.5;
}

/// The full flat schema; every field has a default matching the
/// reference protocol, so an empty config is a valid desk-scale run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// "synthetic" or a path to an array-file dataset directory.
    #[serde(default = "d_dataset")]
    pub dataset: String,
    #[serde(default = "d_synthetic_classes")]
    pub synthetic_classes: usize,
    #[serde(default = "d_synthetic_per_class")]
    pub synthetic_per_class: usize,
    #[serde(default = "d_synthetic_channels")]
    pub synthetic_channels: usize,
    #[serde(default = "d_synthetic_height")]
    pub synthetic_height: usize,
    #[serde(default = "d_synthetic_width")]
    pub synthetic_width: usize,
    #[serde(default = "d_synthetic_noise")]
    pub synthetic_noise: f64,
    #[serde(default = "d_synthetic_translate")]
    pub synthetic_translate: usize,
    #[serde(default = "d_synthetic_brightness")]
    pub synthetic_brightness: f64,

    #[serde(default = "d_label_fraction")]
    pub label_fraction: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_arch_conv_channels")]
    pub arch_conv_channels: Vec<usize>,

    #[serde(default = "d_weak_crop_padding")]
    pub weak_crop_padding: usize,
    #[serde(default = "d_weak_flip_prob")]
    pub weak_flip_prob: f64,

    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_mu")]
    pub mu: usize,
    #[serde(default = "d_batch_labeled")]
    pub batch_labeled: usize,
    #[serde(default = "d_gen_lr")]
    pub gen_lr: f64,
    #[serde(default = "d_gen_momentum")]
    pub gen_momentum: f64,
    #[serde(default = "d_gen_nesterov")]
    pub gen_nesterov: bool,
    #[serde(default = "d_gen_weight_decay")]
    pub gen_weight_decay: f64,
    #[serde(default = "d_gen_total_epochs")]
    pub gen_total_epochs: usize,
    /// 0 means auto: cover the pool once per epoch.
    #[serde(default = "d_gen_steps_per_epoch")]
    pub gen_steps_per_epoch: usize,
    #[serde(default = "d_gen_pretrain_epochs")]
    pub gen_pretrain_epochs: usize,

    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// "sample" or "argmax".
    #[serde(default = "d_nar_mode")]
    pub nar_mode: String,
    #[serde(default = "d_nar_resample_each_epoch")]
    pub nar_resample_each_epoch: bool,

    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_attack_step_size")]
    pub attack_step_size: f64,
    #[serde(default = "d_attack_steps")]
    pub attack_steps: usize,

    #[serde(default = "d_robust_lr")]
    pub robust_lr: f64,
    #[serde(default = "d_robust_momentum")]
    pub robust_momentum: f64,
    #[serde(default = "d_robust_weight_decay")]
    pub robust_weight_decay: f64,
    #[serde(default = "d_robust_epochs")]
    pub robust_epochs: usize,
    #[serde(default = "d_robust_batch")]
    pub robust_batch: usize,
    #[serde(default = "d_lr_milestones")]
    pub lr_milestones: Vec<f64>,
    #[serde(default = "d_lr_decay")]
    pub lr_decay: f64,
    /// "snord", "hard_pseudo", "soft_distill", or "hard_label_rst".
    #[serde(default = "d_strategy")]
    pub strategy: String,
    #[serde(default = "d_ce_on_adversarial")]
    pub ce_on_adversarial: bool,

    #[serde(default = "d_ord_enabled")]
    pub ord_enabled: bool,
    #[serde(default = "d_ord_period")]
    pub ord_period: usize,
    #[serde(default = "d_ord_gen_ratio")]
    pub ord_gen_epochs_per_robust_epoch: usize,

    /// Defaults to `epsilon` when absent.
    #[serde(default)]
    pub eval_epsilon: Option<f64>,
    #[serde(default = "d_eval_steps")]
    pub eval_steps: usize,
    #[serde(default = "d_eval_restarts_strong")]
    pub eval_restarts_strong: usize,

    #[serde(default = "d_ablation_seeds")]
    pub ablation_seeds: Vec<u64>,
    #[serde(default = "d_sweep_lambdas")]
    pub sweep_lambdas: Vec<f64>,
    #[serde(default = "d_sweep_noise_error")]
    pub sweep_noise_error: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config deserializes via defaults")
    }
}

impl RunConfig {
    /// Load from an optional TOML file, then apply `SNORD_*` environment
    /// overrides, then validate.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                Error::MissingDependency(format!("config file {}: {e}", p.display()))
            })?,
            None => String::new(),
        };
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        apply_env_overrides(&mut table, std::env::vars())?;
        let config: RunConfig = table
            .try_into()
            .map_err(|e| Error::config(format!("config schema: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        let config: RunConfig = table
            .try_into()
            .map_err(|e| Error::config(format!("config schema: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch_conv_channels.is_empty() {
            return Err(Error::config("arch_conv_channels must not be empty"));
        }
        self.parse_strategy()?;
        self.parse_nar_mode()?;
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::config(format!(
                "label_fraction must be in (0, 1], got {}",
                self.label_fraction
            )));
        }
        // the composed structs re-validate when built
        Ok(())
    }

    fn parse_strategy(&self) -> Result<TargetStrategy> {
        match self.strategy.as_str() {
            "snord" => Ok(TargetStrategy::Snord),
            "hard_pseudo" => Ok(TargetStrategy::HardPseudo),
            "soft_distill" => Ok(TargetStrategy::SoftDistill),
            "hard_label_rst" => Ok(TargetStrategy::HardLabelRst),
            other => Err(Error::config(format!(
                "strategy: unknown value {other:?} (expected snord, hard_pseudo, soft_distill, hard_label_rst)"
            ))),
        }
    }

    fn parse_nar_mode(&self) -> Result<UnlabeledMode> {
        match self.nar_mode.as_str() {
            "sample" => Ok(UnlabeledMode::Sample),
            "argmax" => Ok(UnlabeledMode::Argmax),
            other => Err(Error::config(format!(
                "nar_mode: unknown value {other:?} (expected sample or argmax)"
            ))),
        }
    }

    /// Materialize the dataset (synthetic or from disk).
    pub fn build_dataset(&self) -> Result<Arc<Dataset>> {
        if self.dataset == "synthetic" {
            let spec = SyntheticSpec {
                num_classes: self.synthetic_classes,
                per_class: self.synthetic_per_class,
                channels: self.synthetic_channels,
                height: self.synthetic_height,
                width: self.synthetic_width,
                noise_sigma: self.synthetic_noise,
                translate_max: self.synthetic_translate,
                brightness_jitter: self.synthetic_brightness,
                seed: self.seed,
                ..SyntheticSpec::default()
            };
            Ok(Arc::new(spec.generate()?))
        } else {
            Ok(Arc::new(arrayfile::read_dataset(Path::new(&self.dataset))?))
        }
    }

    pub fn dataset_descriptor(&self) -> String {
        if self.dataset == "synthetic" {
            format!(
                "synthetic(classes={}, per_class={}, shape=[{},{},{}], noise={}, seed={})",
                self.synthetic_classes,
                self.synthetic_per_class,
                self.synthetic_channels,
                self.synthetic_height,
                self.synthetic_width,
                self.synthetic_noise,
                self.seed
            )
        } else {
            self.dataset.clone()
        }
    }

    pub fn build_split(&self, dataset: &Dataset) -> Result<SSLSplit> {
        make_ssl_split(
            dataset.len(),
            dataset.num_classes(),
            dataset.labels(),
            self.label_fraction,
            self.seed,
        )
    }

    pub fn arch(&self, dataset: &Dataset) -> ArchSpec {
        ArchSpec::conv_blocks(
            dataset.image_shape(),
            &self.arch_conv_channels,
            dataset.num_classes(),
        )
    }

    pub fn weak_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy::weak(self.weak_crop_padding, self.weak_flip_prob, self.seed)
    }

    pub fn ssl_config(&self) -> SSLTrainerConfig {
        SSLTrainerConfig {
            tau: self.tau,
            mu: self.mu,
            batch_size_labeled: self.batch_labeled,
            optimizer: SgdConfig {
                lr: self.gen_lr,
                momentum: self.gen_momentum,
                nesterov: self.gen_nesterov,
                weight_decay: self.gen_weight_decay,
            },
            total_epochs: self.gen_total_epochs,
            steps_per_epoch: if self.gen_steps_per_epoch == 0 {
                None
            } else {
                Some(self.gen_steps_per_epoch)
            },
            weak: self.weak_policy(),
            strong: AugmentationPolicy::strong(self.seed),
            seed: self.seed,
        }
    }

    pub fn train_attack(&self) -> AttackSpec {
        AttackSpec {
            epsilon: self.epsilon,
            step_size: self.attack_step_size,
            num_steps: self.attack_steps,
            num_restarts: 1,
            objective: AttackObjective::CeToTarget,
            random_start: true,
        }
    }

    pub fn robust_config(&self) -> Result<RobustTrainConfig> {
        Ok(RobustTrainConfig {
            beta: self.beta,
            attack: self.train_attack(),
            val_attack: None,
            total_epochs: self.robust_epochs,
            batch_size: self.robust_batch,
            optimizer: SgdConfig {
                lr: self.robust_lr,
                momentum: self.robust_momentum,
                nesterov: false,
                weight_decay: self.robust_weight_decay,
            },
            lr_milestones: self.lr_milestones.clone(),
            lr_decay: self.lr_decay,
            strategy: self.parse_strategy()?,
            nar: NARConfig {
                lambda: self.lambda,
                unlabeled_mode: self.parse_nar_mode()?,
                resample_each_epoch: self.nar_resample_each_epoch,
                seed: self.seed,
            },
            ce_on_adversarial: self.ce_on_adversarial,
            weak: self.weak_policy(),
            seed: self.seed,
        })
    }

    pub fn ord_schedule(&self) -> ORDSchedule {
        ORDSchedule {
            refresh_period: self.ord_period,
            generator_epochs_per_robust_epoch: self.ord_gen_epochs_per_robust_epoch,
            enabled: self.ord_enabled,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let eps = self.eval_epsilon.unwrap_or(self.epsilon);
        EvalConfig {
            pgd: AttackSpec {
                epsilon: eps,
                step_size: self.attack_step_size,
                num_steps: self.eval_steps,
                num_restarts: 1,
                objective: AttackObjective::CeToTarget,
                random_start: true,
            },
            strong: AttackSpec {
                epsilon: eps,
                step_size: self.attack_step_size,
                num_steps: self.eval_steps,
                num_restarts: self.eval_restarts_strong,
                objective: AttackObjective::CeToTarget,
                random_start: true,
            },
            seed: self.seed,
        }
    }

    pub fn noisy_snapshot_spec(&self) -> NoisySnapshotSpec {
        NoisySnapshotSpec {
            error_rate: self.sweep_noise_error,
            ..NoisySnapshotSpec::half_noise(self.seed)
        }
    }

    /// Bundle everything a pipeline run needs. The generator's cosine
    /// schedule spans pretraining plus the interleaved phase.
    pub fn pipeline_params(&self, dataset: &Dataset) -> Result<PipelineParams> {
        let arch = self.arch(dataset);
        let mut gen = self.ssl_config();
        gen.total_epochs = self
            .gen_pretrain_epochs
            .max(1)
            .saturating_add(if self.ord_enabled {
                self.robust_epochs * self.ord_gen_epochs_per_robust_epoch
            } else {
                0
            });
        Ok(PipelineParams {
            gen_arch: arch.clone(),
            robust_arch: arch,
            gen_config: gen,
            robust_config: self.robust_config()?,
            ord: self.ord_schedule(),
            gen_pretrain_epochs: self.gen_pretrain_epochs,
            eval: self.eval_config(),
        })
    }
}

/// Merge `SNORD_*` variables into a parsed config table. Values use TOML
/// syntax; bare words fall back to strings. Unknown keys surface when
/// the table deserializes against the schema.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    for (key, raw) in vars {
        let Some(suffix) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let field = suffix.to_ascii_lowercase();
        let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(raw.clone()),
        };
        table.insert(field, parsed);
    }
    Ok(())
}

/// Resolved artifact paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path, run_id: &str) -> Result<Self> {
        let root = out.join(run_id);
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("snapshots"))?;
        std::fs::create_dir_all(root.join("reports"))?;
        Ok(Self { root })
    }

    pub fn open(out: &Path, run_id: &str) -> Result<Self> {
        let root = out.join(run_id);
        if !root.join("manifest.json").exists() {
            return Err(Error::MissingDependency(format!(
                "run {run_id} under {}",
                out.display()
            )));
        }
        Ok(Self { root })
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn progress(&self) -> PathBuf {
        self.root.join("progress.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn snapshot(&self, id: u64) -> PathBuf {
        self.root.join("snapshots").join(format!("snap-{id}.bin"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_protocol() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.tau, 0.95);
        assert_eq!(cfg.mu, 5);
        assert_eq!(cfg.batch_labeled, 64);
        assert_eq!(cfg.gen_lr, 0.03);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.beta, 6.0);
        assert_eq!(cfg.ord_period, 5);
        assert!((cfg.epsilon - 8.0 / 255.0).abs() < 1e-12);
        assert!((cfg.attack_step_size - 2.0 / 255.0).abs() < 1e-12);
        assert_eq!(cfg.attack_steps, 10);
        assert_eq!(cfg.eval_steps, 20);
        assert_eq!(cfg.lr_milestones, vec![0.5, 0.75]);
        assert_eq!(cfg.lr_decay, 0.1);
        assert_eq!(cfg.robust_weight_decay, 5e-4);
        assert_eq!(cfg.robust_lr, 0.1);
    }

    #[test]
    fn unknown_key_rejected_with_name() {
        let err = RunConfig::from_toml_str("taus = 0.9").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("taus"), "message should name the field: {msg}");
    }

    #[test]
    fn bad_enum_value_rejected() {
        assert!(RunConfig::from_toml_str("strategy = \"bogus\"").is_err());
        assert!(RunConfig::from_toml_str("nar_mode = \"bogus\"").is_err());
    }

    #[test]
    fn env_overrides_parse_toml_values() {
        let mut table: toml::Table = "tau = 0.95".parse().unwrap();
        let vars = vec![
            ("SNORD_TAU".to_string(), "0.5".to_string()),
            ("SNORD_ORD_ENABLED".to_string(), "false".to_string()),
            ("SNORD_LR_MILESTONES".to_string(), "[0.3, 0.6]".to_string()),
            ("SNORD_DATASET".to_string(), "synthetic".to_string()),
            ("OTHER_VAR".to_string(), "ignored".to_string()),
        ];
        apply_env_overrides(&mut table, vars.into_iter()).unwrap();
        let cfg: RunConfig = table.try_into().unwrap();
        assert_eq!(cfg.tau, 0.5);
        assert!(!cfg.ord_enabled);
        assert_eq!(cfg.lr_milestones, vec![0.3, 0.6]);
        assert_eq!(cfg.dataset, "synthetic");
    }

    #[test]
    fn unknown_env_key_rejected() {
        let mut table: toml::Table = "".parse().unwrap();
        let vars = vec![("SNORD_NOT_A_KEY".to_string(), "1".to_string())];
        apply_env_overrides(&mut table, vars.into_iter()).unwrap();
        let r: std::result::Result<RunConfig, _> = table.try_into();
        assert!(r.is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn builds_consistent_components() {
        let cfg = RunConfig::from_toml_str(
            "synthetic_per_class = 40\nsynthetic_classes = 4\nrobust_epochs = 3",
        )
        .unwrap();
        let ds = cfg.build_dataset().unwrap();
        assert_eq!(ds.len(), 160);
        let split = cfg.build_split(&ds).unwrap();
        split.validate(ds.len()).unwrap();
        let params = cfg.pipeline_params(&ds).unwrap();
        assert_eq!(params.robust_config.total_epochs, 3);
        // generator budget covers pretraining plus interleaved epochs
        assert_eq!(params.gen_config.total_epochs, 10 + 3);
    }
}
