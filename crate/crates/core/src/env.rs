//! The scheduling Markov decision process.
//!
//! A decision point is a system time at which at least one ready operation
//! has an idle compatible machine. Dispatching a pair starts the operation
//! immediately; afterwards the clock advances to the earliest machine
//! completion at which a compatible pair exists again, so every reachable
//! schedule is non-delay. Rewards are differences of the estimated makespan
//! (maximum completion-time lower bound) and telescope to
//! `estimate(s_0) - C_max` over a full rollout.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{FjspInstance, Time};

/// An operation-machine pair; `op` is the global operation id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub op: usize,
    pub machine: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub machine: usize,
    pub start: Time,
    pub end: Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpStatus {
    Unscheduled,
    Processing,
    Completed,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("illegal action: operation {op} on machine {machine} is not a compatible pair at time {time}")]
    IllegalAction { op: usize, machine: usize, time: Time },
    #[error("episode already finished")]
    Finished,
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("trace refers to job {job} operation {operation}, which does not exist")]
    UnknownOperation { job: usize, operation: usize },
}

/// Flattened, precomputed view of an instance shared by all states that
/// schedule it.
#[derive(Debug)]
pub struct Shop {
    pub instance: FjspInstance,
    /// Job of every global operation id.
    pub op_job: Vec<usize>,
    /// Position of every operation inside its job.
    pub op_index: Vec<usize>,
    /// Global id of the first operation of each job (plus a final sentinel).
    pub job_start: Vec<usize>,
    pub op_min: Vec<Time>,
    pub op_max: Vec<Time>,
    pub op_mean: Vec<f64>,
    /// Processing time of `(op, machine)`, `None` when incompatible.
    times: Vec<Option<Time>>,
    /// Operations each machine can process.
    pub machine_ops: Vec<Vec<usize>>,
}

impl Shop {
    pub fn new(instance: FjspInstance) -> Result<Self, EnvError> {
        instance.validate().map_err(|v| {
            EnvError::InvalidInstance(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
        })?;
        let m = instance.num_machines;
        let n_ops = instance.num_operations();
        let mut shop = Shop {
            op_job: Vec::with_capacity(n_ops),
            op_index: Vec::with_capacity(n_ops),
            job_start: Vec::with_capacity(instance.num_jobs + 1),
            op_min: Vec::with_capacity(n_ops),
            op_max: Vec::with_capacity(n_ops),
            op_mean: Vec::with_capacity(n_ops),
            times: vec![None; n_ops * m],
            machine_ops: vec![Vec::new(); m],
            instance,
        };
        let mut id = 0;
        for (j, job) in shop.instance.jobs.iter().enumerate() {
            shop.job_start.push(id);
            for (o, spec) in job.operations.iter().enumerate() {
                shop.op_job.push(j);
                shop.op_index.push(o);
                shop.op_min.push(spec.min_time());
                shop.op_max.push(spec.max_time());
                shop.op_mean.push(spec.mean_time());
                for &(k, p) in &spec.eligible {
                    shop.times[id * m + k] = Some(p);
                    shop.machine_ops[k].push(id);
                }
                id += 1;
            }
        }
        shop.job_start.push(id);
        Ok(shop)
    }

    pub fn num_ops(&self) -> usize {
        self.op_job.len()
    }

    pub fn num_jobs(&self) -> usize {
        self.instance.num_jobs
    }

    pub fn num_machines(&self) -> usize {
        self.instance.num_machines
    }

    pub fn time(&self, op: usize, machine: usize) -> Option<Time> {
        self.times[op * self.num_machines() + machine]
    }

    pub fn eligible(&self, op: usize) -> &[(usize, Time)] {
        &self.instance.jobs[self.op_job[op]].operations[self.op_index[op]].eligible
    }

    pub fn job_ops(&self, job: usize) -> std::ops::Range<usize> {
        self.job_start[job]..self.job_start[job + 1]
    }

    pub fn is_last_in_job(&self, op: usize) -> bool {
        op + 1 == self.job_start[self.op_job[op] + 1]
    }

    pub fn global_id(&self, job: usize, operation: usize) -> Option<usize> {
        if job >= self.num_jobs() {
            return None;
        }
        let range = self.job_ops(job);
        (operation < range.len()).then_some(range.start + operation)
    }
}

/// Outcome of a single dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub reward: Time,
    pub done: bool,
}

/// Mutable state of one scheduling episode.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    shop: Arc<Shop>,
    time: Time,
    assignment: Vec<Option<Assignment>>,
    machine_free_at: Vec<Time>,
    /// Position of the first unscheduled operation in each job.
    next_in_job: Vec<usize>,
    lower_bound: Vec<Time>,
    scheduled: usize,
    initial_estimate: Time,
    actions: Vec<Action>,
}

impl ScheduleState {
    /// Starts an episode at `T_s = 0` with every operation unscheduled.
    pub fn reset(instance: &FjspInstance) -> Result<Self, EnvError> {
        Ok(Self::from_shop(Arc::new(Shop::new(instance.clone())?)))
    }

    pub fn from_shop(shop: Arc<Shop>) -> Self {
        let n_ops = shop.num_ops();
        let mut lower_bound = vec![0; n_ops];
        for job in 0..shop.num_jobs() {
            let mut acc = 0;
            for op in shop.job_ops(job) {
                acc += shop.op_min[op];
                lower_bound[op] = acc;
            }
        }
        let initial_estimate = lower_bound.iter().copied().max().unwrap_or(0);
        let mut state = ScheduleState {
            time: 0,
            assignment: vec![None; n_ops],
            machine_free_at: vec![0; shop.num_machines()],
            next_in_job: vec![0; shop.num_jobs()],
            lower_bound,
            scheduled: 0,
            initial_estimate,
            actions: Vec::new(),
            shop,
        };
        state.refresh_actions();
        state
    }

    pub fn shop(&self) -> &Arc<Shop> {
        &self.shop
    }

    pub fn instance(&self) -> &FjspInstance {
        &self.shop.instance
    }

    /// System time `T_s`.
    pub fn time(&self) -> Time {
        self.time
    }

    pub fn is_done(&self) -> bool {
        self.scheduled == self.shop.num_ops()
    }

    pub fn num_scheduled(&self) -> usize {
        self.scheduled
    }

    pub fn assignment(&self, op: usize) -> Option<Assignment> {
        self.assignment[op]
    }

    pub fn machine_free_at(&self, machine: usize) -> Time {
        self.machine_free_at[machine]
    }

    pub fn lower_bound(&self, op: usize) -> Time {
        self.lower_bound[op]
    }

    pub fn lower_bounds(&self) -> &[Time] {
        &self.lower_bound
    }

    /// Estimated makespan at the initial state; also the feature time scale.
    pub fn initial_estimate(&self) -> Time {
        self.initial_estimate
    }

    pub fn status(&self, op: usize) -> OpStatus {
        match self.assignment[op] {
            None => OpStatus::Unscheduled,
            Some(a) if a.end > self.time => OpStatus::Processing,
            Some(_) => OpStatus::Completed,
        }
    }

    pub fn is_machine_idle(&self, machine: usize) -> bool {
        self.machine_free_at[machine] <= self.time
    }

    /// Time at which `op` became (or becomes) startable with respect to its
    /// job: 0 for a first operation, else the predecessor's completion.
    /// `None` while the predecessor is unscheduled.
    pub fn job_ready_time(&self, op: usize) -> Option<Time> {
        if self.shop.op_index[op] == 0 {
            Some(0)
        } else {
            self.assignment[op - 1].map(|a| a.end)
        }
    }

    /// Unscheduled with a completed predecessor (or first in job).
    pub fn is_ready(&self, op: usize) -> bool {
        self.assignment[op].is_none() && matches!(self.job_ready_time(op), Some(t) if t <= self.time)
    }

    /// Number of unscheduled operations left in `job`.
    pub fn job_remaining_ops(&self, job: usize) -> usize {
        self.shop.job_ops(job).len() - self.next_in_job[job]
    }

    /// The compatible pairs `A(t)`, sorted by (operation, machine).
    pub fn legal_actions(&self) -> &[Action] {
        &self.actions
    }

    /// The candidate set `J_c(t)`: operations that appear in `A(t)`.
    pub fn candidates(&self) -> Vec<usize> {
        let mut ops: Vec<usize> = self.actions.iter().map(|a| a.op).collect();
        ops.dedup();
        ops
    }

    /// Relevant operations `O_u(t)`: all operations except completed ones.
    pub fn relevant_ops(&self) -> Vec<usize> {
        (0..self.shop.num_ops())
            .filter(|&op| self.status(op) != OpStatus::Completed)
            .collect()
    }

    /// Relevant machines `M_u(t)`: machines able to process an unscheduled operation.
    pub fn relevant_machines(&self) -> Vec<usize> {
        (0..self.shop.num_machines())
            .filter(|&k| self.shop.machine_ops[k].iter().any(|&op| self.assignment[op].is_none()))
            .collect()
    }

    /// `max_O C̲(O, s_t)`.
    pub fn estimated_makespan(&self) -> Time {
        self.lower_bound.iter().copied().max().unwrap_or(0)
    }

    fn refresh_actions(&mut self) {
        self.actions.clear();
        for job in 0..self.shop.num_jobs() {
            let pos = self.next_in_job[job];
            let range = self.shop.job_ops(job);
            if pos >= range.len() {
                continue;
            }
            let op = range.start + pos;
            if !self.is_ready(op) {
                continue;
            }
            for &(machine, _) in self.shop.eligible(op) {
                if self.machine_free_at[machine] <= self.time {
                    self.actions.push(Action { op, machine });
                }
            }
        }
    }

    /// Dispatches `action` at the current time and advances the clock to the
    /// next decision point.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::Finished);
        }
        if self.actions.binary_search(&action).is_err() {
            return Err(EnvError::IllegalAction {
                op: action.op,
                machine: action.machine,
                time: self.time,
            });
        }
        let before = self.estimated_makespan();
        let p = self
            .shop
            .time(action.op, action.machine)
            .expect("legal actions are compatible");
        let start = self.time;
        let end = start + p;
        self.assignment[action.op] = Some(Assignment {
            machine: action.machine,
            start,
            end,
        });
        self.machine_free_at[action.machine] = end;
        self.next_in_job[self.shop.op_job[action.op]] += 1;
        self.scheduled += 1;

        self.lower_bound[action.op] = end;
        let job_end = self.shop.job_start[self.shop.op_job[action.op] + 1];
        for succ in action.op + 1..job_end {
            self.lower_bound[succ] = self.lower_bound[succ - 1] + self.shop.op_min[succ];
        }

        let done = self.is_done();
        self.refresh_actions();
        if !done {
            while self.actions.is_empty() {
                let next = self
                    .machine_free_at
                    .iter()
                    .copied()
                    .filter(|&t| t > self.time)
                    .min()
                    .expect("a busy machine exists whenever no pair is compatible");
                self.time = next;
                self.refresh_actions();
            }
        } else {
            // Final clock: every operation has completed.
            self.time = self.machine_free_at.iter().copied().max().unwrap_or(self.time);
        }
        let reward = before - self.estimated_makespan();
        Ok(StepOutcome { reward, done })
    }

    /// The finished schedule. Panics if the episode is not done.
    pub fn extract_schedule(&self) -> ScheduleResult {
        assert!(self.is_done(), "extract_schedule called before the episode finished");
        let shop = &self.shop;
        let ops: Vec<ScheduledOp> = (0..shop.num_ops())
            .map(|op| {
                let a = self.assignment[op].expect("all operations scheduled");
                ScheduledOp {
                    job: shop.op_job[op],
                    operation: shop.op_index[op],
                    machine: a.machine,
                    start: a.start,
                    end: a.end,
                }
            })
            .collect();
        let makespan = ops.iter().map(|o| o.end).max().unwrap_or(0);
        ScheduleResult { ops, makespan }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledOp {
    pub job: usize,
    pub operation: usize,
    pub machine: usize,
    pub start: Time,
    pub end: Time,
}

/// A complete schedule and its makespan `C_max`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleResult {
    pub ops: Vec<ScheduledOp>,
    pub makespan: Time,
}

impl ScheduleResult {
    /// Gantt chart rows: `operation,job,machine,start,end`, all indices 1-based.
    pub fn to_gantt_csv(&self) -> String {
        let mut out = String::from("operation,job,machine,start,end\n");
        for o in &self.ops {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                o.operation + 1,
                o.job + 1,
                o.machine + 1,
                o.start,
                o.end
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleViolation {
    MissingOperation { job: usize, operation: usize },
    UnknownOperation { job: usize, operation: usize },
    Duplicate { job: usize, operation: usize },
    IneligibleMachine { job: usize, operation: usize, machine: usize },
    WrongDuration { job: usize, operation: usize },
    NegativeStart { job: usize, operation: usize },
    Precedence { job: usize, operation: usize },
    Overlap { machine: usize },
    WrongMakespan { reported: Time, actual: Time },
}

/// Independent feasibility check of a schedule against the raw instance:
/// eligibility, durations, precedence, machine non-overlap and makespan.
pub fn validate_schedule(inst: &FjspInstance, sched: &ScheduleResult) -> Result<(), Vec<ScheduleViolation>> {
    use ScheduleViolation as V;
    let mut errs = Vec::new();
    let mut slot: Vec<Vec<Option<&ScheduledOp>>> = inst
        .jobs
        .iter()
        .map(|j| vec![None; j.operations.len()])
        .collect();
    for o in &sched.ops {
        let (job, operation) = (o.job, o.operation);
        let Some(spec) = inst.jobs.get(job).and_then(|j| j.operations.get(operation)) else {
            errs.push(V::UnknownOperation { job, operation });
            continue;
        };
        if slot[job][operation].is_some() {
            errs.push(V::Duplicate { job, operation });
            continue;
        }
        slot[job][operation] = Some(o);
        match spec.time_on(o.machine) {
            None => errs.push(V::IneligibleMachine {
                job,
                operation,
                machine: o.machine,
            }),
            Some(p) if o.end - o.start != p => errs.push(V::WrongDuration { job, operation }),
            _ => {}
        }
        if o.start < 0 {
            errs.push(V::NegativeStart { job, operation });
        }
    }
    for (job, ops) in slot.iter().enumerate() {
        for (operation, o) in ops.iter().enumerate() {
            match o {
                None => errs.push(V::MissingOperation { job, operation }),
                Some(o) if operation > 0 => {
                    if let Some(prev) = ops[operation - 1] {
                        if o.start < prev.end {
                            errs.push(V::Precedence { job, operation });
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let mut by_machine: Vec<Vec<&ScheduledOp>> = vec![Vec::new(); inst.num_machines];
    for o in &sched.ops {
        if let Some(v) = by_machine.get_mut(o.machine) {
            v.push(o);
        }
    }
    for (machine, v) in by_machine.iter_mut().enumerate() {
        v.sort_by_key(|o| (o.start, o.end));
        if v.windows(2).any(|w| w[1].start < w[0].end) {
            errs.push(V::Overlap { machine });
        }
    }
    let actual = sched.ops.iter().map(|o| o.end).max().unwrap_or(0);
    if actual != sched.makespan {
        errs.push(V::WrongMakespan {
            reported: sched.makespan,
            actual,
        });
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// One dispatch in a rollout trace, with 0-based job/operation/machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub job: usize,
    pub operation: usize,
    pub machine: usize,
    pub time: Time,
    pub reward: Time,
}

/// Action sequence plus rewards; replaying it reproduces the episode.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub steps: Vec<TraceStep>,
    pub makespan: Option<Time>,
}

impl RolloutTrace {
    pub fn record(&mut self, state_before: &ScheduleState, action: Action, outcome: StepOutcome) {
        let shop = state_before.shop();
        self.steps.push(TraceStep {
            job: shop.op_job[action.op],
            operation: shop.op_index[action.op],
            machine: action.machine,
            time: state_before.time(),
            reward: outcome.reward,
        });
    }

    /// Re-executes the recorded actions from a fresh state.
    pub fn replay(&self, inst: &FjspInstance) -> Result<ScheduleState, EnvError> {
        let mut state = ScheduleState::reset(inst)?;
        for s in &self.steps {
            let op = state.shop().global_id(s.job, s.operation).ok_or(EnvError::UnknownOperation {
                job: s.job,
                operation: s.operation,
            })?;
            state.step(Action {
                op,
                machine: s.machine,
            })?;
        }
        Ok(state)
    }
}

/// Runs an episode to completion, choosing actions with `policy`.
/// Returns the final state and the per-step rewards.
pub fn rollout<F>(mut state: ScheduleState, mut policy: F) -> (ScheduleState, Vec<Time>)
where
    F: FnMut(&ScheduleState) -> Action,
{
    let mut rewards = Vec::with_capacity(state.shop().num_ops());
    while !state.is_done() {
        let a = policy(&state);
        let out = state.step(a).expect("policy returned an illegal action");
        rewards.push(out.reward);
    }
    (state, rewards)
}
