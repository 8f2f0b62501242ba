//! Raw state features for relevant operations, relevant machines and
//! compatible pairs, plus the index structures consumed by the attention
//! network.
//!
//! Every time-valued feature is divided by the instance constant
//! `estimated_makespan(s_0)`; counts, proportions, tags and ratios are left
//! unscaled.
//!
//! Operation vector layout:
//! `[min p, mean p, span p, machine proportion, scheduled tag, C̲,
//!   job remaining ops, job remaining workload, waiting time, remaining processing]`
//!
//! Machine vector layout:
//! `[min p, mean p, # unscheduled processable, # processable candidates,
//!   free time, waiting time, working tag, remaining processing]`
//!
//! Pair vector layout:
//! `[p, p/max p of op, p/max p of machine's candidates, p/max p of unscheduled,
//!   p/max p of machine's unscheduled, p/max p over pairs, p/job remaining workload,
//!   op waiting + machine waiting]`

use serde::{Deserialize, Serialize};

use crate::env::{Action, OpStatus, ScheduleState};

pub const OP_FEATURES: usize = 10;
pub const MACHINE_FEATURES: usize = 8;
pub const PAIR_FEATURES: usize = 8;

/// An edge `(k, q)` of the machine competition graph (row indices into
/// `machine_ids`). `candidates` are the operation rows in `C_kq ∩ J_c`,
/// `c` their summed raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetitionEdge {
    pub k: usize,
    pub q: usize,
    pub candidates: Vec<usize>,
    pub c: [f64; OP_FEATURES],
}

/// The state `s_t` as feature matrices with their index maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub time: i64,
    pub scale: f64,
    /// Global operation id of each operation row (`O_u`, ascending).
    pub op_ids: Vec<usize>,
    /// Machine index of each machine row (`M_u`, ascending).
    pub machine_ids: Vec<usize>,
    /// `A(t)` in the environment's order.
    pub actions: Vec<Action>,
    pub op_feats: Vec<[f64; OP_FEATURES]>,
    pub machine_feats: Vec<[f64; MACHINE_FEATURES]>,
    pub pair_feats: Vec<[f64; PAIR_FEATURES]>,
    /// Predecessor / successor row of each operation row, when relevant.
    pub pred: Vec<Option<usize>>,
    pub succ: Vec<Option<usize>>,
    /// Competition edges sorted by `(k, q)`; every machine has its self-edge.
    pub edges: Vec<CompetitionEdge>,
    pub action_op_row: Vec<usize>,
    pub action_machine_row: Vec<usize>,
    /// `candidate_mask[op_row][machine_row]` is true iff the pair is in `A(t)`.
    pub candidate_mask: Vec<Vec<bool>>,
}

impl FeatureBundle {
    pub fn num_ops(&self) -> usize {
        self.op_ids.len()
    }

    pub fn num_machines(&self) -> usize {
        self.machine_ids.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    /// Edge indices of each machine row, in `q` order.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_machines()];
        for (e, edge) in self.edges.iter().enumerate() {
            out[edge.k].push(e);
        }
        out
    }
}

fn op_waiting(state: &ScheduleState, op: usize) -> i64 {
    if state.assignment(op).is_some() {
        return 0;
    }
    match state.job_ready_time(op) {
        Some(t) if t <= state.time() => state.time() - t,
        _ => 0,
    }
}

fn machine_waiting(state: &ScheduleState, k: usize) -> i64 {
    if state.is_machine_idle(k) {
        state.time() - state.machine_free_at(k)
    } else {
        0
    }
}

fn job_workload(state: &ScheduleState, job: usize) -> f64 {
    let shop = state.shop();
    shop.job_ops(job)
        .filter(|&o| state.assignment(o).is_none())
        .map(|o| shop.op_mean[o])
        .sum()
}

/// Feature vector of a relevant operation.
pub fn op_features(state: &ScheduleState, op: usize) -> [f64; OP_FEATURES] {
    let shop = state.shop();
    let scale = state.initial_estimate() as f64;
    let job = shop.op_job[op];
    let min = shop.op_min[op] as f64;
    let max = shop.op_max[op] as f64;
    let remaining = match (state.status(op), state.assignment(op)) {
        (OpStatus::Processing, Some(a)) => a.end - state.time(),
        _ => 0,
    };
    [
        min / scale,
        shop.op_mean[op] / scale,
        (max - min) / scale,
        shop.eligible(op).len() as f64 / shop.num_machines() as f64,
        if state.assignment(op).is_some() { 1.0 } else { 0.0 },
        state.lower_bound(op) as f64 / scale,
        state.job_remaining_ops(job) as f64,
        job_workload(state, job) / scale,
        op_waiting(state, op) as f64 / scale,
        remaining as f64 / scale,
    ]
}

fn machine_static(state: &ScheduleState, k: usize) -> (f64, f64) {
    let shop = state.shop();
    let times: Vec<i64> = shop.machine_ops[k]
        .iter()
        .filter_map(|&o| shop.time(o, k))
        .collect();
    if times.is_empty() {
        return (0.0, 0.0);
    }
    let min = *times.iter().min().unwrap() as f64;
    let mean = times.iter().sum::<i64>() as f64 / times.len() as f64;
    (min, mean)
}

/// Feature vector of a relevant machine.
pub fn machine_features(state: &ScheduleState, k: usize) -> [f64; MACHINE_FEATURES] {
    let shop = state.shop();
    let scale = state.initial_estimate() as f64;
    let (min, mean) = machine_static(state, k);
    let unscheduled = shop.machine_ops[k]
        .iter()
        .filter(|&&o| state.assignment(o).is_none())
        .count();
    let candidates = state
        .candidates()
        .into_iter()
        .filter(|&o| shop.time(o, k).is_some())
        .count();
    let free_at = state.machine_free_at(k);
    let working = !state.is_machine_idle(k);
    [
        min / scale,
        mean / scale,
        unscheduled as f64,
        candidates as f64,
        free_at as f64 / scale,
        machine_waiting(state, k) as f64 / scale,
        if working { 1.0 } else { 0.0 },
        if working { (free_at - state.time()) as f64 / scale } else { 0.0 },
    ]
}

/// Maxima shared by all pair feature vectors of one state.
struct PairContext {
    candidate_max_on: Vec<i64>,
    unscheduled_max: i64,
    unscheduled_max_on: Vec<i64>,
    action_max: i64,
}

impl PairContext {
    fn new(state: &ScheduleState) -> Self {
        let shop = state.shop();
        let m = shop.num_machines();
        let mut candidate_max_on = vec![0; m];
        for op in state.candidates() {
            for &(k, p) in shop.eligible(op) {
                candidate_max_on[k] = candidate_max_on[k].max(p);
            }
        }
        let mut unscheduled_max = 0;
        let mut unscheduled_max_on = vec![0; m];
        for op in 0..shop.num_ops() {
            if state.assignment(op).is_some() {
                continue;
            }
            for &(k, p) in shop.eligible(op) {
                unscheduled_max = unscheduled_max.max(p);
                unscheduled_max_on[k] = unscheduled_max_on[k].max(p);
            }
        }
        let action_max = state
            .legal_actions()
            .iter()
            .map(|a| shop.time(a.op, a.machine).unwrap_or(0))
            .max()
            .unwrap_or(0);
        PairContext {
            candidate_max_on,
            unscheduled_max,
            unscheduled_max_on,
            action_max,
        }
    }
}

fn pair_features_with(state: &ScheduleState, ctx: &PairContext, a: Action) -> [f64; PAIR_FEATURES] {
    let shop = state.shop();
    let scale = state.initial_estimate() as f64;
    let p = shop
        .time(a.op, a.machine)
        .expect("pair features requested for an incompatible pair") as f64;
    let ratio = |d: i64| p / d as f64;
    [
        p / scale,
        ratio(shop.op_max[a.op]),
        ratio(ctx.candidate_max_on[a.machine]),
        ratio(ctx.unscheduled_max),
        ratio(ctx.unscheduled_max_on[a.machine]),
        ratio(ctx.action_max),
        p / job_workload(state, shop.op_job[a.op]),
        (op_waiting(state, a.op) + machine_waiting(state, a.machine)) as f64 / scale,
    ]
}

/// Feature vector of a compatible pair.
pub fn pair_features(state: &ScheduleState, a: Action) -> [f64; PAIR_FEATURES] {
    pair_features_with(state, &PairContext::new(state), a)
}

/// Builds every feature matrix and index structure of the current state.
pub fn build_bundle(state: &ScheduleState) -> FeatureBundle {
    assert!(!state.is_done(), "no features for a finished episode");
    let shop = state.shop();
    let n_ops = shop.num_ops();

    let op_ids = state.relevant_ops();
    let mut op_row = vec![usize::MAX; n_ops];
    for (r, &op) in op_ids.iter().enumerate() {
        op_row[op] = r;
    }
    let machine_ids = state.relevant_machines();
    let mut machine_row = vec![usize::MAX; shop.num_machines()];
    for (r, &k) in machine_ids.iter().enumerate() {
        machine_row[k] = r;
    }

    let op_feats: Vec<_> = op_ids.iter().map(|&op| op_features(state, op)).collect();
    let machine_feats = machine_ids.iter().map(|&k| machine_features(state, k)).collect();
    let ctx = PairContext::new(state);
    let actions = state.legal_actions().to_vec();
    let pair_feats = actions.iter().map(|&a| pair_features_with(state, &ctx, a)).collect();

    let row_of = |op: usize| (op_row[op] != usize::MAX).then_some(op_row[op]);
    let pred = op_ids
        .iter()
        .map(|&op| (shop.op_index[op] > 0).then(|| row_of(op - 1)).flatten())
        .collect();
    let succ = op_ids
        .iter()
        .map(|&op| (!shop.is_last_in_job(op)).then(|| row_of(op + 1)).flatten())
        .collect();

    let mut is_candidate = vec![false; n_ops];
    for a in &actions {
        is_candidate[a.op] = true;
    }
    let mut edges = Vec::new();
    for (kr, &k) in machine_ids.iter().enumerate() {
        for (qr, &q) in machine_ids.iter().enumerate() {
            let mut shared = shop.machine_ops[k]
                .iter()
                .copied()
                .filter(|&o| state.assignment(o).is_none() && shop.time(o, q).is_some())
                .peekable();
            if shared.peek().is_none() {
                continue;
            }
            let candidates: Vec<usize> = shared.filter(|&o| is_candidate[o]).map(|o| op_row[o]).collect();
            let mut c = [0.0; OP_FEATURES];
            for &r in &candidates {
                for (ci, fi) in c.iter_mut().zip(op_feats[r].iter()) {
                    *ci += fi;
                }
            }
            edges.push(CompetitionEdge {
                k: kr,
                q: qr,
                candidates,
                c,
            });
        }
    }

    let mut candidate_mask = vec![vec![false; machine_ids.len()]; op_ids.len()];
    let action_op_row: Vec<usize> = actions.iter().map(|a| op_row[a.op]).collect();
    let action_machine_row: Vec<usize> = actions.iter().map(|a| machine_row[a.machine]).collect();
    for (&o, &k) in action_op_row.iter().zip(&action_machine_row) {
        candidate_mask[o][k] = true;
    }

    FeatureBundle {
        time: state.time(),
        scale: state.initial_estimate() as f64,
        op_ids,
        machine_ids,
        actions,
        op_feats,
        machine_feats,
        pair_feats,
        pred,
        succ,
        edges,
        action_op_row,
        action_machine_row,
        candidate_mask,
    }
}
