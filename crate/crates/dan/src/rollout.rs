//! Episodes driven by the network, stepped in lockstep so every decision
//! round is one batched forward pass.

use fjsp_core::features::build_bundle;
use fjsp_core::{Action, FeatureBundle, FjspInstance, ScheduleResult, ScheduleState, Time};
use rand::Rng;

use crate::model::{select_action, Policy, Strategy};

#[derive(Debug, Clone)]
pub struct Step {
    pub bundle: FeatureBundle,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: Time,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Empty unless the episode was recorded.
    pub steps: Vec<Step>,
    pub actions: Vec<Action>,
    pub rewards: Vec<Time>,
    pub initial_estimate: Time,
    pub schedule: ScheduleResult,
}

impl Trajectory {
    pub fn makespan(&self) -> Time {
        self.schedule.makespan
    }

    pub fn total_reward(&self) -> Time {
        self.rewards.iter().sum()
    }
}

/// Runs one episode per instance. Actions are drawn in instance order each
/// round, so results depend only on the parameters, instances and `rng`.
pub fn run_episodes<R: Rng + ?Sized>(
    policy: &Policy,
    instances: &[FjspInstance],
    strategy: Strategy,
    rng: &mut R,
    record: bool,
) -> Vec<Trajectory> {
    let mut states: Vec<ScheduleState> = instances
        .iter()
        .map(|i| ScheduleState::reset(i).expect("valid instance"))
        .collect();
    let mut steps: Vec<Vec<Step>> = vec![Vec::new(); states.len()];
    let mut rewards: Vec<Vec<Time>> = vec![Vec::new(); states.len()];
    let mut actions: Vec<Vec<Action>> = vec![Vec::new(); states.len()];
    loop {
        let active: Vec<usize> = (0..states.len()).filter(|&i| !states[i].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let bundles: Vec<FeatureBundle> = active.iter().map(|&i| build_bundle(&states[i])).collect();
        let refs: Vec<&FeatureBundle> = bundles.iter().collect();
        let decisions = policy.evaluate(&refs);
        for ((&i, bundle), d) in active.iter().zip(bundles).zip(decisions) {
            let (a, log_prob) = select_action(&d.log_probs, strategy, rng);
            let out = states[i].step(bundle.actions[a]).expect("legal action");
            rewards[i].push(out.reward);
            actions[i].push(bundle.actions[a]);
            if record {
                steps[i].push(Step {
                    bundle,
                    action: a,
                    log_prob,
                    value: d.value,
                    reward: out.reward,
                });
            }
        }
    }
    states
        .iter()
        .zip(steps)
        .zip(rewards)
        .zip(actions)
        .map(|(((s, steps), rewards), actions)| Trajectory {
            steps,
            actions,
            rewards,
            initial_estimate: s.initial_estimate(),
            schedule: s.extract_schedule(),
        })
        .collect()
}

/// One greedy episode.
pub fn solve_greedy(policy: &Policy, inst: &FjspInstance) -> Trajectory {
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    run_episodes(policy, std::slice::from_ref(inst), Strategy::Greedy, &mut unused, false)
        .pop()
        .unwrap()
}

/// Best of `samples` sampled episodes and one greedy episode; the greedy
/// episode wins ties.
pub fn solve_sampling<R: Rng + ?Sized>(policy: &Policy, inst: &FjspInstance, samples: usize, rng: &mut R) -> Trajectory {
    let mut best = solve_greedy(policy, inst);
    let copies = vec![inst.clone(); samples];
    for t in run_episodes(policy, &copies, Strategy::Sample, rng, false) {
        if t.makespan() < best.makespan() {
            best = t;
        }
    }
    best
}
