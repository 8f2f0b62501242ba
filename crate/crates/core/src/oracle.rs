//! Exact makespan solver for tiny instances.
//!
//! Depth-first branch and bound over semi-active schedules. Every node
//! appends one `(next operation of some job, eligible machine)` pair at its
//! earliest start `max(job ready, machine free)`. Children are generated in
//! strictly increasing `(start, job)` order, which enumerates each
//! semi-active schedule exactly once; the set contains an optimal schedule,
//! including schedules where an operation waits while a machine is idle.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::env::{validate_schedule, ScheduleResult, ScheduledOp};
use crate::instance::{FjspInstance, Time};
use crate::pdr::{pdr_solve, PdrPolicy, Rule, TieBreak};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchBudget {
    pub nodes: u64,
    pub time: Option<Duration>,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            nodes: 50_000_000,
            time: Some(Duration::from_secs(60)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub makespan: Time,
    pub schedule: ScheduleResult,
    pub nodes: u64,
    /// True iff the search space was exhausted within the budget.
    pub proven: bool,
}

struct Search<'a> {
    inst: &'a FjspInstance,
    /// Remaining minimum processing time of each job from each position.
    tail: Vec<Vec<Time>>,
    job_next: Vec<usize>,
    job_ready: Vec<Time>,
    machine_free: Vec<Time>,
    remaining_min: Time,
    stack: Vec<ScheduledOp>,
    best: Time,
    best_ops: Vec<ScheduledOp>,
    nodes: u64,
    budget: SearchBudget,
    started: Instant,
    aborted: bool,
}

impl Search<'_> {
    fn bound(&self, threshold: Time, makespan: Time) -> Time {
        let m = self.inst.num_machines as Time;
        let mut lb = makespan;
        for (j, &next) in self.job_next.iter().enumerate() {
            let tail = self.tail[j][next];
            if tail > 0 {
                lb = lb.max(self.job_ready[j].max(threshold) + tail);
            }
        }
        let load: Time = self.machine_free.iter().map(|&f| f.max(threshold)).sum::<Time>() + self.remaining_min;
        lb.max((load + m - 1) / m)
    }

    fn out_of_budget(&mut self) -> bool {
        if self.aborted {
            return true;
        }
        if self.nodes >= self.budget.nodes {
            self.aborted = true;
        } else if let Some(limit) = self.budget.time {
            if self.nodes.is_multiple_of(4096) && self.started.elapsed() > limit {
                self.aborted = true;
            }
        }
        self.aborted
    }

    fn dfs(&mut self, last: (Time, usize), makespan: Time, depth_left: usize) {
        if depth_left == 0 {
            if makespan < self.best {
                self.best = makespan;
                self.best_ops = self.stack.clone();
            }
            return;
        }
        self.nodes += 1;
        if self.out_of_budget() {
            return;
        }
        // (end, start, job, machine)
        let mut children: Vec<(Time, Time, usize, usize)> = Vec::new();
        for (j, job) in self.inst.jobs.iter().enumerate() {
            let Some(spec) = job.operations.get(self.job_next[j]) else {
                continue;
            };
            for &(k, p) in &spec.eligible {
                let start = self.job_ready[j].max(self.machine_free[k]);
                if (start, j) <= last {
                    continue;
                }
                children.push((start + p, start, j, k));
            }
        }
        children.sort_unstable();
        for (end, start, j, k) in children {
            let op = self.job_next[j];
            let min_p = self.inst.jobs[j].operations[op].min_time();
            let (saved_ready, saved_free) = (self.job_ready[j], self.machine_free[k]);
            self.job_next[j] += 1;
            self.job_ready[j] = end;
            self.machine_free[k] = end;
            self.remaining_min -= min_p;
            let child_makespan = makespan.max(end);
            if self.bound(start, child_makespan) < self.best {
                self.stack.push(ScheduledOp {
                    job: j,
                    operation: op,
                    machine: k,
                    start,
                    end,
                });
                self.dfs((start, j), child_makespan, depth_left - 1);
                self.stack.pop();
            }
            self.remaining_min += min_p;
            self.machine_free[k] = saved_free;
            self.job_ready[j] = saved_ready;
            self.job_next[j] -= 1;
            if self.aborted {
                return;
            }
        }
    }
}

fn incumbent(inst: &FjspInstance) -> ScheduleResult {
    let mut best: Option<ScheduleResult> = None;
    for rule in Rule::ALL {
        let mut policy = PdrPolicy::deterministic(rule);
        let start = crate::env::ScheduleState::reset(inst).expect("valid instance");
        let (end, _) = crate::env::rollout(start, |s| policy.action(s));
        let sched = end.extract_schedule();
        if best.as_ref().is_none_or(|b| sched.makespan < b.makespan) {
            best = Some(sched);
        }
    }
    best.expect("at least one rule")
}

/// Solves `inst` to optimality if the budget allows.
pub fn solve_exact(inst: &FjspInstance, budget: SearchBudget) -> OracleResult {
    inst.validate().expect("solve_exact needs a valid instance");
    let seed = incumbent(inst);
    let tail = inst
        .jobs
        .iter()
        .map(|job| {
            let mut t = vec![0; job.operations.len() + 1];
            for i in (0..job.operations.len()).rev() {
                t[i] = t[i + 1] + job.operations[i].min_time();
            }
            t
        })
        .collect();
    let remaining_min = inst.operations().map(|(_, _, s)| s.min_time()).sum();
    let mut search = Search {
        inst,
        tail,
        job_next: vec![0; inst.num_jobs],
        job_ready: vec![0; inst.num_jobs],
        machine_free: vec![0; inst.num_machines],
        remaining_min,
        stack: Vec::with_capacity(inst.num_operations()),
        best: seed.makespan,
        best_ops: Vec::new(),
        nodes: 0,
        budget,
        started: Instant::now(),
        aborted: false,
    };
    search.dfs((Time::MIN, 0), 0, inst.num_operations());
    let schedule = if search.best_ops.is_empty() {
        seed
    } else {
        let mut ops = search.best_ops;
        ops.sort_by_key(|o| (o.job, o.operation));
        ScheduleResult {
            makespan: search.best,
            ops,
        }
    };
    debug_assert!(validate_schedule(inst, &schedule).is_ok());
    OracleResult {
        makespan: schedule.makespan,
        schedule,
        nodes: search.nodes,
        proven: !search.aborted,
    }
}

/// Plain exhaustive enumeration of every dispatch sequence (any job's next
/// operation on any eligible machine, appended at its earliest start). No
/// pruning or ordering; exponential, for cross-checking the solver on
/// instances with a handful of operations.
pub fn enumerate_optimum(inst: &FjspInstance) -> Time {
    fn go(inst: &FjspInstance, next: &mut [usize], ready: &mut [Time], free: &mut [Time], cmax: Time) -> Time {
        let mut best = Time::MAX;
        let mut any = false;
        for j in 0..inst.num_jobs {
            let Some(spec) = inst.jobs[j].operations.get(next[j]) else {
                continue;
            };
            any = true;
            for &(k, p) in &spec.eligible {
                let end = ready[j].max(free[k]) + p;
                let (r, f) = (ready[j], free[k]);
                next[j] += 1;
                ready[j] = end;
                free[k] = end;
                best = best.min(go(inst, next, ready, free, cmax.max(end)));
                next[j] -= 1;
                ready[j] = r;
                free[k] = f;
            }
        }
        if any {
            best
        } else {
            cmax
        }
    }
    go(
        inst,
        &mut vec![0; inst.num_jobs],
        &mut vec![0; inst.num_jobs],
        &mut vec![0; inst.num_machines],
        0,
    )
}

/// Mean makespan of a rule with seeded ties, used for oracle dominance checks.
pub fn pdr_mean(inst: &FjspInstance, rule: Rule, runs: usize, seed: u64) -> f64 {
    pdr_solve(rule, TieBreak::Seeded(seed), inst, runs)
        .expect("valid instance")
        .mean
}
