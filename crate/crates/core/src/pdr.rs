//! Priority dispatching rules generalized to the flexible setting.
//!
//! FIFO, MOPNR and MWKR rank candidate operations and then pick one of the
//! idle compatible machines; SPT ranks the compatible pairs directly.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvError, ScheduleState};
use crate::instance::{FjspInstance, Time};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    /// Earliest ready candidate, then the machine idle the longest.
    Fifo,
    /// Most operations remaining in the job.
    Mopnr,
    /// Shortest processing time over all compatible pairs.
    Spt,
    /// Most work remaining in the job (sum of mean processing times).
    Mwkr,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Fifo, Rule::Mopnr, Rule::Spt, Rule::Mwkr];
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fifo" => Ok(Rule::Fifo),
            "mopnr" => Ok(Rule::Mopnr),
            "spt" => Ok(Rule::Spt),
            "mwkr" => Ok(Rule::Mwkr),
            other => Err(format!("unknown dispatching rule `{other}`")),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Fifo => "fifo",
            Rule::Mopnr => "mopnr",
            Rule::Spt => "spt",
            Rule::Mwkr => "mwkr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreak {
    /// Lowest `(job, operation, machine)` wins.
    Lexicographic,
    /// Uniform among tied pairs, driven by this seed.
    Seeded(u64),
}

/// A dispatching rule with its tie-breaking mode. Holds the tie-break RNG,
/// so one value drives exactly one rollout.
#[derive(Debug, Clone)]
pub struct PdrPolicy {
    pub rule: Rule,
    pub tie_break: TieBreak,
    rng: Option<ChaCha8Rng>,
}

impl PdrPolicy {
    pub fn new(rule: Rule, tie_break: TieBreak) -> Self {
        let rng = match tie_break {
            TieBreak::Lexicographic => None,
            TieBreak::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        PdrPolicy { rule, tie_break, rng }
    }

    pub fn deterministic(rule: Rule) -> Self {
        Self::new(rule, TieBreak::Lexicographic)
    }

    fn pick<T: Copy>(&mut self, tied: &[T]) -> T {
        match &mut self.rng {
            None => tied[0],
            Some(rng) => tied[rng.gen_range(0..tied.len())],
        }
    }

    /// Chooses a member of `A(t)` according to the rule.
    pub fn action(&mut self, state: &ScheduleState) -> Action {
        let actions = state.legal_actions();
        assert!(!actions.is_empty(), "pdr_action needs a non-terminal state");
        let shop = state.shop().clone();
        let time_of = |a: &Action| shop.time(a.op, a.machine).expect("compatible pair");

        if self.rule == Rule::Spt {
            let best = actions.iter().map(time_of).min().unwrap();
            let tied: Vec<Action> = actions.iter().copied().filter(|a| time_of(a) == best).collect();
            return self.pick(&tied);
        }

        // Operation priority: larger is better.
        let candidates = state.candidates();
        let priority = |op: usize| -> f64 {
            let job = shop.op_job[op];
            match self.rule {
                Rule::Fifo => -(state.job_ready_time(op).unwrap_or(0) as f64),
                Rule::Mopnr => (shop.job_ops(job).end - op - 1) as f64,
                Rule::Mwkr => shop
                    .job_ops(job)
                    .filter(|&o| state.assignment(o).is_none())
                    .map(|o| shop.op_mean[o])
                    .sum(),
                Rule::Spt => unreachable!(),
            }
        };
        let scores: Vec<f64> = candidates.iter().map(|&op| priority(op)).collect();
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied_ops: Vec<usize> = candidates
            .iter()
            .zip(&scores)
            .filter(|(_, &s)| s == best)
            .map(|(&op, _)| op)
            .collect();
        let op = self.pick(&tied_ops);

        let machines: Vec<Action> = actions.iter().copied().filter(|a| a.op == op).collect();
        // FIFO: machine that has been idle the longest; others: fastest machine.
        let key = |a: &Action| -> Time {
            match self.rule {
                Rule::Fifo => state.machine_free_at(a.machine),
                _ => time_of(a),
            }
        };
        let best = machines.iter().map(key).min().unwrap();
        let tied: Vec<Action> = machines.into_iter().filter(|a| key(a) == best).collect();
        self.pick(&tied)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdrStats {
    pub mean: f64,
    pub best: Time,
    pub makespans: Vec<Time>,
}

/// Runs `runs` complete rollouts. With a seeded tie-break, run `r` uses
/// the seed `seed + r`; with lexicographic ties every run is identical.
pub fn pdr_solve(
    rule: Rule,
    tie_break: TieBreak,
    inst: &FjspInstance,
    runs: usize,
) -> Result<PdrStats, EnvError> {
    assert!(runs >= 1, "pdr_solve needs at least one run");
    let start = ScheduleState::reset(inst)?;
    let makespans: Vec<Time> = (0..runs)
        .map(|r| {
            let tb = match tie_break {
                TieBreak::Lexicographic => TieBreak::Lexicographic,
                TieBreak::Seeded(s) => TieBreak::Seeded(s.wrapping_add(r as u64)),
            };
            let mut policy = PdrPolicy::new(rule, tb);
            let (end, _) = crate::env::rollout(start.clone(), |s| policy.action(s));
            end.extract_schedule().makespan
        })
        .collect();
    Ok(PdrStats {
        mean: makespans.iter().sum::<Time>() as f64 / runs as f64,
        best: *makespans.iter().min().unwrap(),
        makespans,
    })
}
