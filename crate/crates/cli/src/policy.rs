use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use fjsp_core::env::RolloutTrace;
use fjsp_core::pdr::{PdrPolicy, Rule, TieBreak};
use fjsp_core::{rollout, Action, FjspInstance, ScheduleResult, ScheduleState};
use fjsp_dan::checkpoint::load_policy;
use fjsp_dan::{solve_greedy, solve_sampling, Policy, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::sha256_file;

/// A policy named on the command line: a rule name, `random`, or a
/// checkpoint path.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Pdr(Rule),
    Random,
    Learned {
        path: PathBuf,
        sha256: String,
        policy: Box<Policy>,
    },
}

impl PolicySpec {
    pub fn parse(s: &str) -> Result<Self> {
        if let Ok(rule) = s.parse::<Rule>() {
            return Ok(PolicySpec::Pdr(rule));
        }
        if s.eq_ignore_ascii_case("random") {
            return Ok(PolicySpec::Random);
        }
        let path = Path::new(s);
        if !path.exists() {
            bail!("`{s}` is neither a dispatching rule (fifo, mopnr, spt, mwkr), `random`, nor an existing checkpoint");
        }
        let (policy, _) = load_policy(path)?;
        Ok(PolicySpec::Learned {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
            policy: Box::new(policy),
        })
    }

    /// Report label, including the strategy for stochastic policies.
    pub fn label(&self, strategy: Strategy, samples: usize) -> String {
        let suffix = match strategy {
            Strategy::Greedy => "greedy".to_string(),
            Strategy::Sample => format!("sample{samples}"),
        };
        match self {
            PolicySpec::Pdr(rule) => rule.to_string(),
            PolicySpec::Random => match strategy {
                Strategy::Greedy => "random".into(),
                Strategy::Sample => format!("random-best{samples}"),
            },
            PolicySpec::Learned { path, .. } => {
                format!("dan:{}-{suffix}", crate::io::instance_name(path))
            }
        }
    }

    /// Whether a seed is needed for a reproducible run.
    pub fn needs_seed(&self, strategy: Strategy) -> bool {
        match self {
            PolicySpec::Pdr(_) => false,
            PolicySpec::Random => true,
            PolicySpec::Learned { .. } => strategy == Strategy::Sample,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub schedule: ScheduleResult,
    pub trace: RolloutTrace,
    /// Wall-clock time of the solve itself.
    pub seconds: f64,
}

fn random_rollout(inst: &FjspInstance, rng: &mut ChaCha8Rng) -> (ScheduleResult, Vec<Action>) {
    let mut actions = Vec::new();
    let start = ScheduleState::reset(inst).expect("valid instance");
    let (end, _) = rollout(start, |s| {
        let legal = s.legal_actions();
        let a = legal[rng.gen_range(0..legal.len())];
        actions.push(a);
        a
    });
    (end.extract_schedule(), actions)
}

fn trace_of(inst: &FjspInstance, actions: &[Action]) -> RolloutTrace {
    let mut state = ScheduleState::reset(inst).expect("valid instance");
    let mut trace = RolloutTrace::default();
    for &a in actions {
        let before = state.clone();
        let out = state.step(a).expect("recorded action is legal");
        trace.record(&before, a, out);
    }
    trace.makespan = Some(state.extract_schedule().makespan);
    trace
}

/// Solves one instance. `stream` selects the instance's random stream so
/// results do not depend on evaluation order.
pub fn solve(
    spec: &PolicySpec,
    inst: &FjspInstance,
    strategy: Strategy,
    samples: usize,
    seed: Option<u64>,
    stream: u64,
) -> SolveOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    rng.set_stream(stream);
    let started = Instant::now();
    let (schedule, actions) = match spec {
        PolicySpec::Pdr(rule) => {
            let tie = seed.map_or(TieBreak::Lexicographic, |s| TieBreak::Seeded(s.wrapping_add(stream)));
            let mut policy = PdrPolicy::new(*rule, tie);
            let mut actions = Vec::new();
            let (end, _) = rollout(ScheduleState::reset(inst).expect("valid instance"), |s| {
                let a = policy.action(s);
                actions.push(a);
                a
            });
            (end.extract_schedule(), actions)
        }
        PolicySpec::Random => {
            let runs = if strategy == Strategy::Sample { samples.max(1) } else { 1 };
            let mut best = random_rollout(inst, &mut rng);
            for _ in 1..runs {
                let next = random_rollout(inst, &mut rng);
                if next.0.makespan < best.0.makespan {
                    best = next;
                }
            }
            best
        }
        PolicySpec::Learned { policy, .. } => {
            let t = match strategy {
                Strategy::Greedy => solve_greedy(policy, inst),
                Strategy::Sample => solve_sampling(policy, inst, samples, &mut rng),
            };
            (t.schedule, t.actions)
        }
    };
    let seconds = started.elapsed().as_secs_f64();
    SolveOutcome {
        trace: trace_of(inst, &actions),
        schedule,
        seconds,
    }
}
