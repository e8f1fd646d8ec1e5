//! L∞-bounded adversarial example generation and robust-accuracy
//! evaluation.
//!
//! PGD iterates signed-gradient steps projected back into the ε-ball and
//! the valid input range. Per-example randomness (restart noise) derives
//! from (seed, example key, restart), so batched execution matches
//! per-example execution and restarts are reproducible. Attacks never
//! mutate the model; they take it by shared reference.

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::math;
use crate::model::{scalar, Classifier, LossSpec, Scalar};
use crate::rng::{derive_rng, tag};
use rand::Rng;

/// Inner objective maximized by the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    /// Cross-entropy against fixed target rows (one-hot or soft).
    CeToTarget,
    /// KL(softmax(f(x)) ‖ softmax(f(x+δ))) with the clean distribution
    /// frozen at the start of the attack.
    KlToReference,
}

/// L∞ threat-model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub step_size: f64,
    pub num_steps: usize,
    pub num_restarts: usize,
    pub objective: AttackObjective,
    pub random_start: bool,
}

impl AttackSpec {
    /// Training attack: ε = 8/255, 10 steps of 2/255, single restart.
    pub fn train_default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            num_steps: 10,
            num_restarts: 1,
            objective: AttackObjective::CeToTarget,
            random_start: true,
        }
    }

    /// Evaluation attack: 20 steps of 2/255, single restart.
    pub fn pgd20() -> Self {
        Self {
            num_steps: 20,
            ..Self::train_default()
        }
    }

    /// Strong evaluation attack: 20 steps, 5 restarts.
    pub fn pgd20_strong() -> Self {
        Self {
            num_steps: 20,
            num_restarts: 5,
            ..Self::train_default()
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.num_steps > 0 && !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::config("step_size must be positive when num_steps > 0"));
        }
        if self.num_restarts == 0 {
            return Err(Error::config("num_restarts must be at least 1"));
        }
        Ok(())
    }
}

/// A restart aborted by a non-finite gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackDiagnostic {
    pub example: usize,
    pub restart: usize,
    pub step: usize,
}

/// Best-restart attack result for a batch.
#[derive(Debug, Clone)]
pub struct AttackOutcome<F: Scalar> {
    pub x_adv: Array4<F>,
    /// Final inner-objective value per example.
    pub objective: Array1<F>,
    /// Winning restart per example (first restart achieving the max).
    pub chosen_restart: Vec<usize>,
    pub diagnostics: Vec<AttackDiagnostic>,
}

/// Fast gradient sign method: single ε-sized CE step from the clean
/// input. Identical, bit for bit, to PGD with one step of size ε and no
/// random start.
pub fn fgsm<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Array4<F>,
    targets: &Array2<F>,
    epsilon: f64,
) -> Result<Array4<F>> {
    let spec = AttackSpec {
        epsilon,
        step_size: epsilon.max(f64::MIN_POSITIVE),
        num_steps: 1,
        num_restarts: 1,
        objective: AttackObjective::CeToTarget,
        random_start: false,
    };
    Ok(pgd(model, x, Some(targets), &spec, 0, None)?.x_adv)
}

/// Projected gradient descent under the L∞ ball of `spec.epsilon`.
///
/// `targets` supplies CE target rows and must be `Some` for the CE
/// objective; the KL objective freezes softmax(f(x)) as its reference.
/// `example_keys`, when given, key each example's restart noise stream
/// (defaults to the position in the batch). Among restarts the first one
/// achieving the highest final objective wins, per example.
pub fn pgd<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Array4<F>,
    targets: Option<&Array2<F>>,
    spec: &AttackSpec,
    seed: u64,
    example_keys: Option<&[u64]>,
) -> Result<AttackOutcome<F>> {
    spec.validate()?;
    let n = x.dim().0;
    if let Some(keys) = example_keys {
        if keys.len() != n {
            return Err(Error::shape(format!("{n} example keys"), format!("{}", keys.len())));
        }
    }
    let loss = match spec.objective {
        AttackObjective::CeToTarget => {
            let t = targets.ok_or_else(|| Error::config("CE objective requires targets"))?;
            if t.nrows() != n {
                return Err(Error::shape(format!("{n} target rows"), format!("{}", t.nrows())));
            }
            LossSpec::CeToTarget { targets: t.clone() }
        }
        AttackObjective::KlToReference => {
            let reference = math::softmax_batch(&model.forward_batch(x));
            LossSpec::KlToReference { reference }
        }
    };

    let mut best_adv = x.clone();
    let mut best_obj = Array1::from_elem(n, F::neg_infinity());
    let mut best_restart = vec![0usize; n];
    let mut diagnostics = Vec::new();

    for restart in 0..spec.num_restarts {
        let (adv, aborted) = run_restart(model, x, &loss, spec, seed, example_keys, restart)?;
        for d in &aborted {
            diagnostics.push(*d);
        }
        let aborted_examples: std::collections::HashSet<usize> =
            aborted.iter().map(|d| d.example).collect();
        let values = loss.values(&model.forward_batch(&adv));
        for i in 0..n {
            if aborted_examples.contains(&i) {
                continue;
            }
            if values[i] > best_obj[i] {
                best_obj[i] = values[i];
                best_restart[i] = restart;
                best_adv
                    .index_axis_mut(Axis(0), i)
                    .assign(&adv.index_axis(Axis(0), i));
            }
        }
    }
    // Every restart aborted for some example: fall back to the clean
    // input so the output always satisfies the bound contracts.
    let clean_values = loss.values(&model.forward_batch(x));
    for i in 0..n {
        if best_obj[i] == F::neg_infinity() {
            best_obj[i] = clean_values[i];
            best_adv
                .index_axis_mut(Axis(0), i)
                .assign(&x.index_axis(Axis(0), i));
        }
    }
    Ok(AttackOutcome {
        x_adv: best_adv,
        objective: best_obj,
        chosen_restart: best_restart,
        diagnostics,
    })
}

/// One restart: returns the perturbed batch and any per-example aborts.
fn run_restart<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Array4<F>,
    loss: &LossSpec<F>,
    spec: &AttackSpec,
    seed: u64,
    example_keys: Option<&[u64]>,
    restart: usize,
) -> Result<(Array4<F>, Vec<AttackDiagnostic>)> {
    let n = x.dim().0;
    let eps = scalar::<F>(spec.epsilon);
    let alpha = scalar::<F>(spec.step_size);
    let zero = F::zero();
    let one = F::one();

    let mut adv = x.clone();
    if spec.random_start && spec.epsilon > 0.0 {
        for i in 0..n {
            let key = example_keys.map_or(i as u64, |k| k[i]);
            let mut rng = derive_rng(seed, &[tag::ATTACK, key, restart as u64]);
            let mut slice = adv.index_axis_mut(Axis(0), i);
            for v in slice.iter_mut() {
                let noise: F = rng.gen_range(-eps..=eps);
                *v = (*v + noise).max(zero).min(one);
            }
        }
    }

    let mut aborted: Vec<AttackDiagnostic> = Vec::new();
    let mut frozen = vec![false; n];
    for step in 0..spec.num_steps {
        let grad = match model.input_gradient_batch(&adv, loss) {
            Ok(g) => g,
            Err(_) => {
                // Batched gradient failed on non-finite values; isolate the
                // offending examples and freeze them at their current state.
                let logits = model.forward_batch(&adv);
                for i in 0..n {
                    if !frozen[i] && logits.row(i).iter().any(|v| !v.is_finite()) {
                        frozen[i] = true;
                        aborted.push(AttackDiagnostic {
                            example: i,
                            restart,
                            step,
                        });
                    }
                }
                // Rebuild a finite batch by substituting the clean input
                // for frozen examples, then retry once.
                let mut patched = adv.clone();
                for i in 0..n {
                    if frozen[i] {
                        patched
                            .index_axis_mut(Axis(0), i)
                            .assign(&x.index_axis(Axis(0), i));
                    }
                }
                model.input_gradient_batch(&patched, loss)?
            }
        };
        for i in 0..n {
            if frozen[i] {
                continue;
            }
            let g = grad.index_axis(Axis(0), i);
            if g.iter().any(|v| !v.is_finite()) {
                frozen[i] = true;
                aborted.push(AttackDiagnostic {
                    example: i,
                    restart,
                    step,
                });
                continue;
            }
            let x0 = x.index_axis(Axis(0), i);
            let mut xa = adv.index_axis_mut(Axis(0), i);
            for ((a, &x0v), &gv) in xa.iter_mut().zip(x0.iter()).zip(g.iter()) {
                let s = if gv > zero {
                    one
                } else if gv < zero {
                    -one
                } else {
                    zero
                };
                let delta = (*a + alpha * s - x0v).max(-eps).min(eps);
                *a = (x0v + delta).max(zero).min(one);
            }
        }
    }
    Ok((adv, aborted))
}

/// Attack driven by KL divergence from the model's own clean
/// distribution: the inner maximization of the consistency term.
pub fn kl_pgd<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    x: &Array4<F>,
    spec: &AttackSpec,
    seed: u64,
    example_keys: Option<&[u64]>,
) -> Result<AttackOutcome<F>> {
    let spec = AttackSpec {
        objective: AttackObjective::KlToReference,
        ..*spec
    };
    pgd(model, x, None, &spec, seed, example_keys)
}

/// Per-example evaluation record, persisted to the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalExampleRecord {
    pub index: usize,
    pub true_class: usize,
    pub clean_class: usize,
    /// Prediction on the chosen adversarial candidate.
    pub adv_class: usize,
    /// Restart that produced the candidate; `None` means the clean input
    /// itself was chosen.
    pub chosen_restart: Option<usize>,
    pub linf: f64,
}

/// Robust-accuracy evaluation result.
#[derive(Debug, Clone)]
pub struct RobustEval {
    pub standard_accuracy: f64,
    pub robust_accuracy: f64,
    pub records: Vec<EvalExampleRecord>,
}

/// Fraction of examples still classified correctly under the attack.
///
/// The candidate set per example is the clean input plus every restart's
/// output, so the zero perturbation is always feasible for the attacker:
/// an example counts as robust only if all candidates are classified
/// correctly, which makes RA ≤ SA exact and RA non-increasing in the
/// number of restarts. The reported candidate prefers misclassifying
/// restarts (earliest wins); if none misclassifies, the clean input is
/// reported with `chosen_restart = None`.
pub fn evaluate_robust_accuracy<F: Scalar, M: Classifier<F> + ?Sized>(
    model: &M,
    dataset: &Dataset,
    indices: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<RobustEval>
where
    F: From<f32>,
{
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty index set"));
    }
    spec.validate()?;
    let num_classes = dataset.num_classes();
    let mut records = Vec::with_capacity(indices.len());
    let mut clean_correct = 0usize;
    let mut robust_correct = 0usize;

    const CHUNK: usize = 128;
    for chunk in indices.chunks(CHUNK) {
        let xf = dataset.gather(chunk)?;
        let x: Array4<F> = xf.mapv(<F as From<f32>>::from);
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.label(i)).collect();
        let targets = math::one_hot_batch::<F>(&labels, num_classes)?;
        let keys: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();

        let clean_logits = model.forward_batch(&x);
        let mut adv_class: Vec<usize> = Vec::with_capacity(chunk.len());
        let mut chosen: Vec<Option<usize>> = vec![None; chunk.len()];
        let mut linf: Vec<f64> = vec![0.0; chunk.len()];
        for row in clean_logits.rows() {
            adv_class.push(math::argmax(row.as_slice().unwrap()));
        }

        for restart in 0..spec.num_restarts {
            let single = AttackSpec {
                num_restarts: 1,
                ..*spec
            };
            let out = pgd(
                model,
                &x,
                Some(&targets),
                &single,
                crate::rng::mix(seed, &[tag::EVAL, restart as u64]),
                Some(&keys),
            )?;
            let logits = model.forward_batch(&out.x_adv);
            for bi in 0..chunk.len() {
                if chosen[bi].is_some() {
                    continue; // already found a misclassifying candidate
                }
                let pred = math::argmax(logits.row(bi).as_slice().unwrap());
                if pred != labels[bi] {
                    chosen[bi] = Some(restart);
                    adv_class[bi] = pred;
                    let d = (&out.x_adv.index_axis(Axis(0), bi)
                        - &x.index_axis(Axis(0), bi))
                        .iter()
                        .fold(F::zero(), |m, v| m.max(v.abs()));
                    linf[bi] = d.to_f64().unwrap();
                }
            }
        }

        for bi in 0..chunk.len() {
            let clean_class = math::argmax(clean_logits.row(bi).as_slice().unwrap());
            let clean_ok = clean_class == labels[bi];
            let robust_ok = clean_ok && chosen[bi].is_none();
            clean_correct += usize::from(clean_ok);
            robust_correct += usize::from(robust_ok);
            records.push(EvalExampleRecord {
                index: chunk[bi],
                true_class: labels[bi],
                clean_class,
                adv_class: adv_class[bi],
                chosen_restart: chosen[bi],
                linf: linf[bi],
            });
        }
    }

    Ok(RobustEval {
        standard_accuracy: clean_correct as f64 / indices.len() as f64,
        robust_accuracy: robust_correct as f64 / indices.len() as f64,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::model::convnet::{ArchSpec, ConvNet};
    use crate::model::linear::LinearModel;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array4};

    fn two_class_linear(w: [f64; 2]) -> LinearModel<f64> {
        LinearModel::new(
            [1, 1, 2],
            array![[w[0], w[1]], [0.0, 0.0]],
            array![0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let model = two_class_linear([1.0, -1.0]);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.4, 0.6]).unwrap();
        let t = math::one_hot_batch::<f64>(&[0], 2).unwrap();
        let adv = fgsm(&model, &x, &t, 0.0).unwrap();
        assert_eq!(adv, x);
        let spec = AttackSpec {
            epsilon: 0.0,
            ..AttackSpec::train_default()
        };
        let out = pgd(&model, &x, Some(&t), &spec, 3, None).unwrap();
        assert_eq!(out.x_adv, x);
    }

    #[test]
    fn zero_steps_no_random_start_is_identity() {
        let model = two_class_linear([1.0, -1.0]);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.4, 0.6]).unwrap();
        let t = math::one_hot_batch::<f64>(&[0], 2).unwrap();
        let spec = AttackSpec {
            num_steps: 0,
            random_start: false,
            ..AttackSpec::train_default()
        };
        let out = pgd(&model, &x, Some(&t), &spec, 3, None).unwrap();
        assert_eq!(out.x_adv, x);
    }

    #[test]
    fn fgsm_matches_closed_form_on_linear_model() {
        // With target class 0, dCE/dx = (p0 − 1)·w; p0 − 1 < 0 so the
        // ascent direction is −sign(w).
        let w = [0.8, -0.4];
        let model = two_class_linear(w);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, 0.5]).unwrap();
        let t = math::one_hot_batch::<f64>(&[0], 2).unwrap();
        let eps = 0.1;
        let adv = fgsm(&model, &x, &t, eps).unwrap();
        assert_abs_diff_eq!(adv[[0, 0, 0, 0]], 0.5 - eps * w[0].signum(), epsilon = 1e-12);
        assert_abs_diff_eq!(adv[[0, 0, 0, 1]], 0.5 - eps * w[1].signum(), epsilon = 1e-12);
    }

    #[test]
    fn fgsm_saturates_at_boundary() {
        // all-ones input and a gradient pushing up: clamp keeps x_adv = 1
        let w = [-1.0, -2.0]; // target 0 → ascent along +w sign = −1 … pick w so ascent is positive
        let model = two_class_linear(w);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 1.0]).unwrap();
        let t = math::one_hot_batch::<f64>(&[0], 2).unwrap();
        let adv = fgsm(&model, &x, &t, 0.05).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn pgd_reaches_linf_corner_on_linear_model() {
        let w = [0.9, -0.7];
        let model = two_class_linear(w);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, 0.5]).unwrap();
        let t = math::one_hot_batch::<f64>(&[0], 2).unwrap();
        let spec = AttackSpec {
            epsilon: 0.1,
            step_size: 0.02,
            num_steps: 20,
            num_restarts: 1,
            objective: AttackObjective::CeToTarget,
            random_start: false,
        };
        let out = pgd(&model, &x, Some(&t), &spec, 0, None).unwrap();
        // CE to class 0 is maximized at δ = −ε·sign(w)
        assert_abs_diff_eq!(out.x_adv[[0, 0, 0, 0]], 0.4, epsilon = 1e-9);
        assert_abs_diff_eq!(out.x_adv[[0, 0, 0, 1]], 0.6, epsilon = 1e-9);
    }

    #[test]
    fn fgsm_equals_single_step_pgd_bitwise() {
        let arch = ArchSpec::conv_blocks([1, 8, 8], &[4], 3);
        let model = ConvNet::<f32>::new(arch, 9).unwrap();
        let ds = SyntheticSpec {
            num_classes: 3,
            per_class: 8,
            height: 8,
            width: 8,
            ..SyntheticSpec::tiny(2)
        }
        .generate()
        .unwrap();
        let x = ds.gather(&(0..12).collect::<Vec<_>>()).unwrap();
        let labels: Vec<usize> = (0..12).map(|i| ds.label(i)).collect();
        let t = math::one_hot_batch::<f32>(&labels, 3).unwrap();
        let eps = 0.07;
        let a = fgsm(&model, &x, &t, eps).unwrap();
        let spec = AttackSpec {
            epsilon: eps,
            step_size: eps,
            num_steps: 1,
            num_restarts: 1,
            objective: AttackObjective::CeToTarget,
            random_start: false,
        };
        let b = pgd(&model, &x, Some(&t), &spec, 0, None).unwrap().x_adv;
        assert_eq!(a, b, "FGSM must be bit-compatible with 1-step PGD");
    }

    #[test]
    fn perturbation_bound_holds_under_random_specs() {
        let arch = ArchSpec::conv_blocks([1, 8, 8], &[4], 3);
        let model = ConvNet::<f32>::new(arch, 4).unwrap();
        let ds = SyntheticSpec {
            num_classes: 3,
            per_class: 4,
            height: 8,
            width: 8,
            ..SyntheticSpec::tiny(8)
        }
        .generate()
        .unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let x = ds.gather(&idx).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
        let t = math::one_hot_batch::<f32>(&labels, 3).unwrap();
        for (eps, steps, rs) in [(0.03, 5, true), (0.1, 3, false), (0.25, 8, true)] {
            let spec = AttackSpec {
                epsilon: eps,
                step_size: eps / 3.0,
                num_steps: steps,
                num_restarts: 2,
                objective: AttackObjective::CeToTarget,
                random_start: rs,
            };
            let out = pgd(&model, &x, Some(&t), &spec, 77, None).unwrap();
            let diff = &out.x_adv - &x;
            let max = diff.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(max as f64 <= eps + 1e-6, "bound violated: {max} > {eps}");
            assert!(out
                .x_adv
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn kl_attack_on_constant_model_moves_nothing_useful() {
        // constant logits → KL ≡ 0 for any perturbation and gradient 0
        let model = LinearModel::new(
            [1, 1, 2],
            array![[0.0f64, 0.0], [0.0, 0.0]],
            array![0.3, -0.2],
        )
        .unwrap();
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, 0.5]).unwrap();
        let spec = AttackSpec {
            random_start: false,
            ..AttackSpec::train_default()
        };
        let out = kl_pgd(&model, &x, &spec, 1, None).unwrap();
        assert_eq!(out.x_adv, x);
        assert_abs_diff_eq!(out.objective[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_gradient_direction_matches_finite_differences() {
        // 2-class logistic model. At the clean point the KL gradient is
        // identically zero (it is the objective's minimum), so probe a
        // displaced point inside the ball, where a KL-PGD step actually
        // moves.
        let w = [1.3, -0.6];
        let model = two_class_linear(w);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.45, 0.55]).unwrap();
        let reference = math::softmax_batch(&model.forward_batch(&x));
        let loss = LossSpec::KlToReference {
            reference: reference.clone(),
        };
        let at_clean = model.input_gradient_batch(&x, &loss).unwrap();
        assert!(at_clean.iter().all(|v| v.abs() < 1e-12));
        let mut probe = x.clone();
        probe[[0, 0, 0, 0]] += 0.03;
        probe[[0, 0, 0, 1]] -= 0.02;
        let grad = model.input_gradient_batch(&probe, &loss).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = probe.clone();
            xp[[0, 0, 0, j]] += h;
            let mut xm = probe.clone();
            xm[[0, 0, 0, j]] -= h;
            let kp = loss.values(&model.forward_batch(&xp))[0];
            let km = loss.values(&model.forward_batch(&xm))[0];
            let fd = (kp - km) / (2.0 * h);
            let an = grad[[0, 0, 0, j]];
            assert!(
                (an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-8),
                "component {j}: analytic {an} vs fd {fd}"
            );
            assert_eq!(an.signum(), fd.signum(), "step direction must agree");
        }
    }

    #[test]
    fn restarts_never_decrease_objective() {
        let arch = ArchSpec::conv_blocks([1, 8, 8], &[4], 3);
        let model = ConvNet::<f32>::new(arch, 21).unwrap();
        let ds = SyntheticSpec {
            num_classes: 3,
            per_class: 4,
            height: 8,
            width: 8,
            ..SyntheticSpec::tiny(3)
        }
        .generate()
        .unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let x = ds.gather(&idx).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
        let t = math::one_hot_batch::<f32>(&labels, 3).unwrap();
        let base = AttackSpec {
            epsilon: 0.08,
            step_size: 0.02,
            num_steps: 5,
            num_restarts: 1,
            objective: AttackObjective::CeToTarget,
            random_start: true,
        };
        let one = pgd(&model, &x, Some(&t), &base, 5, None).unwrap();
        let many = pgd(
            &model,
            &x,
            Some(&t),
            &AttackSpec {
                num_restarts: 4,
                ..base
            },
            5,
            None,
        )
        .unwrap();
        for i in 0..8 {
            assert!(
                many.objective[i] >= one.objective[i],
                "example {i}: {} < {}",
                many.objective[i],
                one.objective[i]
            );
        }
    }

    #[test]
    fn attack_leaves_model_parameters_untouched() {
        let arch = ArchSpec::conv_blocks([1, 8, 8], &[4], 3);
        let model = ConvNet::<f32>::new(arch, 13).unwrap();
        let before: Vec<u32> = model.params().iter().map(|v| v.to_bits()).collect();
        let x = Array4::from_elem((2, 1, 8, 8), 0.5f32);
        let t = math::one_hot_batch::<f32>(&[0, 1], 3).unwrap();
        let _ = pgd(
            &model,
            &x,
            Some(&t),
            &AttackSpec::train_default(),
            0,
            None,
        )
        .unwrap();
        let after: Vec<u32> = model.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    /// Model that emits non-finite logits in a region of input space, to
    /// exercise the per-restart abort path.
    struct PoisonModel;

    impl Classifier<f64> for PoisonModel {
        fn input_shape(&self) -> [usize; 3] {
            [1, 1, 2]
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn forward_batch(&self, x: &Array4<f64>) -> Array2<f64> {
            let n = x.dim().0;
            let mut out = Array2::zeros((n, 2));
            for i in 0..n {
                let v = x[[i, 0, 0, 0]];
                if v > 0.55 {
                    out[[i, 0]] = f64::INFINITY;
                } else {
                    out[[i, 0]] = v;
                    out[[i, 1]] = -v;
                }
            }
            out
        }
        fn input_gradient_batch(
            &self,
            x: &Array4<f64>,
            loss: &LossSpec<f64>,
        ) -> Result<Array4<f64>> {
            let logits = self.forward_batch(x);
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite logits"));
            }
            let d = loss.dlogits(&logits);
            let (n, ..) = x.dim();
            let mut g = Array4::zeros(x.raw_dim());
            for i in 0..n {
                g[[i, 0, 0, 0]] = d[[i, 0]] - d[[i, 1]];
            }
            Ok(g)
        }
    }

    #[test]
    fn nonfinite_gradient_aborts_restart_with_diagnostic() {
        let model = PoisonModel;
        // example 0 starts near the poison region and will step into it;
        // example 1 stays safe
        let x = Array4::from_shape_vec((2, 1, 1, 2), vec![0.54, 0.5, 0.2, 0.5]).unwrap();
        let t = math::one_hot_batch::<f64>(&[1, 1], 2).unwrap();
        let spec = AttackSpec {
            epsilon: 0.2,
            step_size: 0.05,
            num_steps: 4,
            num_restarts: 1,
            objective: AttackObjective::CeToTarget,
            random_start: false,
        };
        let out = pgd(&model, &x, Some(&t), &spec, 0, None).unwrap();
        assert!(
            out.diagnostics.iter().any(|d| d.example == 0),
            "poisoned example should abort"
        );
        // the safe example still gets attacked within bounds
        let moved = (out.x_adv[[1, 0, 0, 0]] - 0.2).abs();
        assert!(moved > 1e-9);
        assert!(out.x_adv.iter().all(|v| v.is_finite()));
    }
}
