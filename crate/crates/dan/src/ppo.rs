//! Clipped-surrogate actor-critic update.

use fjsp_autodiff::{Adam, Graph, Tensor};
use fjsp_core::FeatureBundle;
use thiserror::Error;

use crate::model::{BatchIndex, Policy};
use crate::rollout::Trajectory;

/// Generalized advantage estimates and value targets for one episode, with
/// `v(s_T) = 0` after the last step.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "one value per reward");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = 0.0;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// Loss weights and clipping for [`ppo_update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoParams {
    pub epochs: usize,
    pub clip: f64,
    pub policy_coef: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

/// A transition ready for optimization.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub bundle: &'a FeatureBundle,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    /// Means over the epochs.
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Largest `|ρ - 1|` seen in the first epoch.
    pub first_epoch_ratio_dev: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpoError {
    #[error("non-finite loss in epoch {epoch}: policy {policy}, value {value}, entropy {entropy}")]
    NonFinite {
        epoch: usize,
        policy: f64,
        value: f64,
        entropy: f64,
    },
}

/// Flattens trajectories into samples. Rewards are divided by the episode's
/// initial lower bound when `scale_rewards` is set; advantages are
/// standardized over the whole batch when `normalize` is set.
pub fn prepare_samples(
    trajectories: &[Trajectory],
    gamma: f64,
    lambda: f64,
    scale_rewards: bool,
    normalize: bool,
) -> Vec<Sample<'_>> {
    let mut out = Vec::new();
    for t in trajectories {
        let scale = if scale_rewards {
            1.0 / t.initial_estimate as f64
        } else {
            1.0
        };
        let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward as f64 * scale).collect();
        let values: Vec<f64> = t.steps.iter().map(|s| s.value).collect();
        let (adv, targets) = compute_gae(&rewards, &values, gamma, lambda);
        for ((s, a), v) in t.steps.iter().zip(adv).zip(targets) {
            out.push(Sample {
                bundle: &s.bundle,
                action: s.action,
                old_log_prob: s.log_prob,
                advantage: a,
                target: v,
            });
        }
    }
    if normalize && out.len() > 1 {
        let n = out.len() as f64;
        let mean = out.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = out.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        for s in &mut out {
            s.advantage = (s.advantage - mean) / std;
        }
    }
    out
}

/// Scalar losses of one epoch, plus the graph holding them.
pub struct LossGraph {
    pub graph: Graph,
    pub total: fjsp_autodiff::Var,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub ratios: Vec<f64>,
}

/// Builds `policy_coef·L_clip + value_coef·L_value − entropy_coef·H`.
pub fn build_loss(policy: &Policy, samples: &[Sample<'_>], p: &PpoParams) -> LossGraph {
    let bundles: Vec<&FeatureBundle> = samples.iter().map(|s| s.bundle).collect();
    let batch = BatchIndex::new(&bundles);
    let n = samples.len();
    let mut g = Graph::new();
    let out = policy.forward(&mut g, &batch);

    let flat = g.reshape(out.log_probs, n * batch.max_actions, 1);
    let picks: Vec<usize> = samples
        .iter()
        .enumerate()
        .map(|(b, s)| b * batch.max_actions + s.action)
        .collect();
    let lp = g.gather_rows(flat, &picks);
    let old = g.constant(Tensor::column(samples.iter().map(|s| s.old_log_prob).collect()));
    let adv = g.constant(Tensor::column(samples.iter().map(|s| s.advantage).collect()));
    let diff = g.sub(lp, old);
    let ratio = g.exp(diff);
    let s1 = g.mul(ratio, adv);
    let clipped = g.clamp(ratio, 1.0 - p.clip, 1.0 + p.clip);
    let s2 = g.mul(clipped, adv);
    let surr = g.minimum(s1, s2);
    let surr = g.mean(surr);
    let policy_loss = g.scale(surr, -1.0);

    let target = g.constant(Tensor::column(samples.iter().map(|s| s.target).collect()));
    let err = g.sub(out.values, target);
    let sq = g.square(err);
    let value_loss = g.mean(sq);

    // Padded entries hold log-prob 0, so p·log p vanishes there.
    let probs = g.exp(out.log_probs);
    let plogp = g.mul(probs, out.log_probs);
    let total_plogp = g.sum(plogp);
    let entropy = g.scale(total_plogp, -1.0 / n as f64);

    let a = g.scale(policy_loss, p.policy_coef);
    let b = g.scale(value_loss, p.value_coef);
    let c = g.scale(entropy, -p.entropy_coef);
    let ab = g.add(a, b);
    let total = g.add(ab, c);

    LossGraph {
        policy_loss: g.value(policy_loss).item(),
        value_loss: g.value(value_loss).item(),
        entropy: g.value(entropy).item(),
        ratios: g.value(ratio).data().to_vec(),
        total,
        graph: g,
    }
}

/// `epochs` full-batch Adam steps on the clipped objective.
pub fn ppo_update(
    policy: &mut Policy,
    adam: &mut Adam,
    samples: &[Sample<'_>],
    p: &PpoParams,
) -> Result<UpdateStats, PpoError> {
    let mut stats = UpdateStats::default();
    for epoch in 0..p.epochs {
        let loss = build_loss(policy, samples, p);
        let total = loss.graph.value(loss.total).item();
        if !total.is_finite() {
            return Err(PpoError::NonFinite {
                epoch: epoch + 1,
                policy: loss.policy_loss,
                value: loss.value_loss,
                entropy: loss.entropy,
            });
        }
        if epoch == 0 {
            stats.first_epoch_ratio_dev = loss.ratios.iter().fold(0.0, |m, r| m.max((r - 1.0).abs()));
        }
        stats.policy_loss += loss.policy_loss / p.epochs as f64;
        stats.value_loss += loss.value_loss / p.epochs as f64;
        stats.entropy += loss.entropy / p.epochs as f64;
        let grads = loss.graph.backward(loss.total).param_grads(&policy.store);
        adam.step(&mut policy.store, &grads);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Strategy};
    use crate::rollout::run_episodes;
    use fjsp_core::features::build_bundle;
    use fjsp_core::instance::gen_sd2;
    use fjsp_core::{FjspInstance, Job, OperationSpec, ScheduleState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> PpoParams {
        PpoParams {
            epochs: 4,
            clip: 0.2,
            policy_coef: 1.0,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            heads: 2,
            op_dims: vec![4, 3],
            machine_dims: vec![3, 3],
            hidden: 5,
            hidden_layers: 2,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn gae_closed_forms() {
        let (a, t) = compute_gae(&[-3.0], &[1.5], 1.0, 0.98);
        assert_eq!((a[0], t[0]), (-4.5, -3.0));

        let r = [-1.0, 0.0, -2.0, -0.5];
        let v = [0.3, -0.2, 0.7, 0.1];
        let (a, _) = compute_gae(&r, &v, 0.9, 0.0);
        for k in 0..4 {
            let next = if k + 1 < 4 { v[k + 1] } else { 0.0 };
            assert!((a[k] - (r[k] + 0.9 * next - v[k])).abs() < 1e-15);
        }
        let (a, t) = compute_gae(&r, &v, 1.0, 1.0);
        for k in 0..4 {
            let g: f64 = r[k..].iter().sum();
            assert!((a[k] - (g - v[k])).abs() < 1e-12);
            assert!((t[k] - g).abs() < 1e-12);
        }
    }

    fn trajectories(policy: &Policy, seed: u64, n: usize) -> Vec<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let insts: Vec<FjspInstance> = (0..n).map(|_| gen_sd2(3, 2, &mut rng)).collect();
        run_episodes(policy, &insts, Strategy::Sample, &mut rng, true)
    }

    #[test]
    fn first_epoch_is_on_policy() {
        let policy = Policy::new(small(), 1);
        let trajs = trajectories(&policy, 2, 4);
        let samples = prepare_samples(&trajs, 1.0, 0.98, true, true);
        let loss = build_loss(&policy, &samples, &params());
        assert!(loss.ratios.iter().all(|r| (r - 1.0).abs() < 1e-9));
        let mean_adv = samples.iter().map(|s| s.advantage).sum::<f64>() / samples.len() as f64;
        assert!((loss.policy_loss + mean_adv).abs() < 1e-12);
    }

    #[test]
    fn zero_advantages_give_no_policy_gradient() {
        let policy = Policy::new(small(), 3);
        let trajs = trajectories(&policy, 4, 3);
        let mut samples = prepare_samples(&trajs, 1.0, 0.98, true, false);
        samples.iter_mut().for_each(|s| s.advantage = 0.0);
        let p = PpoParams {
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..params()
        };
        let loss = build_loss(&policy, &samples, &p);
        let grads = loss.graph.backward(loss.total).param_grads(&policy.store);
        assert!(grads.iter().all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn normalization_is_increasing_affine() {
        let policy = Policy::new(small(), 5);
        let trajs = trajectories(&policy, 6, 3);
        let raw = prepare_samples(&trajs, 1.0, 0.98, true, false);
        let norm = prepare_samples(&trajs, 1.0, 0.98, true, true);
        let mean = norm.iter().map(|s| s.advantage).sum::<f64>() / norm.len() as f64;
        assert!(mean.abs() < 1e-12);
        for i in 1..raw.len() {
            let raw_order = raw[i - 1].advantage < raw[i].advantage;
            assert_eq!(raw_order, norm[i - 1].advantage < norm[i].advantage);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let policy = Policy::new(small(), 7);
        let trajs = trajectories(&policy, 8, 2);
        let mut samples = prepare_samples(&trajs, 1.0, 0.98, true, true);
        // Move the behaviour policy so some ratios leave the clip range.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in &mut samples {
            s.old_log_prob += rng.gen_range(-0.4..0.4);
        }
        let p = params();
        let loss = build_loss(&policy, &samples, &p);
        let grads = loss.graph.backward(loss.total).param_grads(&policy.store);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for id in policy.store.ids() {
            for e in 0..policy.store.get(id).len() {
                let eval = |delta: f64| {
                    let mut q = policy.clone();
                    q.store.get_mut(id).data_mut()[e] += delta;
                    let l = build_loss(&q, &samples, &p);
                    l.graph.value(l.total).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = grads[id.index()].data()[e];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn bandit_probe_increases_preferred_action() {
        // Two jobs of one op each on one machine: exactly two actions.
        let inst = FjspInstance::new(
            1,
            vec![
                Job { operations: vec![OperationSpec::new(vec![(0, 3)])] },
                Job { operations: vec![OperationSpec::new(vec![(0, 5)])] },
            ],
        );
        let bundle = build_bundle(&ScheduleState::reset(&inst).unwrap());
        assert_eq!(bundle.num_actions(), 2);
        let mut policy = Policy::new(small(), 11);
        let mut adam = fjsp_autodiff::Adam::new(&policy.store, 1e-2);
        let p = PpoParams {
            epochs: 1,
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..params()
        };
        let mut prev = policy.evaluate(&[&bundle])[0].probs()[0];
        for _ in 0..15 {
            let d = &policy.evaluate(&[&bundle])[0];
            let samples = vec![
                Sample { bundle: &bundle, action: 0, old_log_prob: d.log_probs[0], advantage: 1.0, target: 0.0 },
                Sample { bundle: &bundle, action: 1, old_log_prob: d.log_probs[1], advantage: -1.0, target: 0.0 },
            ];
            ppo_update(&mut policy, &mut adam, &samples, &p).unwrap();
            let now = policy.evaluate(&[&bundle])[0].probs()[0];
            assert!(now > prev, "{now} <= {prev}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut policy = Policy::new(small(), 12);
        let trajs = trajectories(&policy, 13, 1);
        let mut samples = prepare_samples(&trajs, 1.0, 0.98, true, false);
        samples[0].target = f64::NAN;
        let mut adam = fjsp_autodiff::Adam::new(&policy.store, 1e-3);
        let err = ppo_update(&mut policy, &mut adam, &samples, &params()).unwrap_err();
        assert!(matches!(err, PpoError::NonFinite { epoch: 1, .. }));
    }
}
