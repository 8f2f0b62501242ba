//! Dual attention network with actor and critic heads.
//!
//! All states of a batch are stacked into one disjoint graph: operation rows,
//! machine rows, competition edges and actions of every state are
//! concatenated, and neighbourhoods are padded into fixed-width slot tables
//! so each attention block is a handful of dense tape operations.

use fjsp_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use fjsp_core::features::{MACHINE_FEATURES, OP_FEATURES, PAIR_FEATURES};
use fjsp_core::FeatureBundle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub heads: usize,
    /// Per-head output width of the operation block, one entry per layer.
    pub op_dims: Vec<usize>,
    /// Per-head output width of the machine block, one entry per layer.
    pub machine_dims: Vec<usize>,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            heads: 4,
            op_dims: vec![32, 8],
            machine_dims: vec![32, 8],
            hidden: 64,
            hidden_layers: 2,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.op_dims.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.op_dims.is_empty() || self.op_dims.len() != self.machine_dims.len() {
            return Err("op_dims and machine_dims must be non-empty and of equal length".into());
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden_layers == 0 {
            return Err("heads, hidden and hidden_layers must be positive".into());
        }
        if self.op_dims.iter().chain(&self.machine_dims).any(|&d| d == 0) {
            return Err("layer widths must be positive".into());
        }
        if !self.leaky_slope.is_finite() {
            return Err("leaky_slope must be finite".into());
        }
        Ok(())
    }

    fn aggregated(&self, dims: &[usize], l: usize) -> usize {
        if l + 1 == self.layers() {
            dims[l]
        } else {
            self.heads * dims[l]
        }
    }

    /// Width of layer `l`'s operation output after head aggregation.
    pub fn op_out(&self, l: usize) -> usize {
        self.aggregated(&self.op_dims, l)
    }

    pub fn machine_out(&self, l: usize) -> usize {
        self.aggregated(&self.machine_dims, l)
    }

    pub fn op_in(&self, l: usize) -> usize {
        if l == 0 {
            OP_FEATURES
        } else {
            self.op_out(l - 1)
        }
    }

    pub fn machine_in(&self, l: usize) -> usize {
        if l == 0 {
            MACHINE_FEATURES
        } else {
            self.machine_out(l - 1)
        }
    }

    pub fn global_dim(&self) -> usize {
        self.op_out(self.layers() - 1) + self.machine_out(self.layers() - 1)
    }

    /// `[h_O ‖ h_M ‖ h_G ‖ pair features]`.
    pub fn actor_in(&self) -> usize {
        let l = self.layers() - 1;
        self.op_out(l) + self.machine_out(l) + self.global_dim() + PAIR_FEATURES
    }
}

#[derive(Debug, Clone)]
struct OpHead {
    w: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
}

#[derive(Debug, Clone)]
struct MachineHead {
    z1: ParamId,
    z2: ParamId,
    b_src: ParamId,
    b_dst: ParamId,
    b_edge: ParamId,
}

#[derive(Debug, Clone)]
struct LayerIds {
    op: Vec<OpHead>,
    machine: Vec<MachineHead>,
}

/// Network parameters plus the layout that addresses them.
#[derive(Debug, Clone)]
pub struct Policy {
    pub config: ModelConfig,
    pub store: ParamStore,
    layers: Vec<LayerIds>,
    actor: Vec<(ParamId, ParamId)>,
    critic: Vec<(ParamId, ParamId)>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect())
}

impl Policy {
    /// Fresh parameters, uniform in `±1/sqrt(fan_in)` per tensor.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut add = |name: String, rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            store.add(name, uniform(rng, rows, cols, fan_in))
        };

        let mut layers = Vec::new();
        for l in 0..config.layers() {
            let (oi, od) = (config.op_in(l), config.op_dims[l]);
            let (mi, md) = (config.machine_in(l), config.machine_dims[l]);
            let ci = config.op_out(l);
            let op = (0..config.heads)
                .map(|h| {
                    let p = format!("layer{l}.op.head{h}");
                    OpHead {
                        w: add(format!("{p}.w"), oi, od, oi, &mut rng),
                        a_src: add(format!("{p}.a_src"), od, 1, 2 * od, &mut rng),
                        a_dst: add(format!("{p}.a_dst"), od, 1, 2 * od, &mut rng),
                    }
                })
                .collect();
            let machine = (0..config.heads)
                .map(|h| {
                    let p = format!("layer{l}.machine.head{h}");
                    MachineHead {
                        z1: add(format!("{p}.z1"), mi, md, mi, &mut rng),
                        z2: add(format!("{p}.z2"), ci, md, ci, &mut rng),
                        b_src: add(format!("{p}.b_src"), md, 1, 3 * md, &mut rng),
                        b_dst: add(format!("{p}.b_dst"), md, 1, 3 * md, &mut rng),
                        b_edge: add(format!("{p}.b_edge"), md, 1, 3 * md, &mut rng),
                    }
                })
                .collect();
            layers.push(LayerIds { op, machine });
        }

        let mut mlp = |prefix: &str, input: usize, rng: &mut ChaCha8Rng| {
            let mut dims = vec![input];
            dims.extend(std::iter::repeat_n(config.hidden, config.hidden_layers));
            dims.push(1);
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| {
                    (
                        add(format!("{prefix}.{i}.w"), w[0], w[1], w[0], rng),
                        add(format!("{prefix}.{i}.b"), 1, w[1], w[0], rng),
                    )
                })
                .collect::<Vec<_>>()
        };
        let actor = mlp("actor", config.actor_in(), &mut rng);
        let critic = mlp("critic", config.global_dim(), &mut rng);

        Policy {
            config,
            store,
            layers,
            actor,
            critic,
        }
    }

    /// Rebuilds a policy around stored tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self, String> {
        config.validate()?;
        let mut policy = Policy::new(config, 0);
        if tensors.len() != policy.store.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                policy.store.len(),
                tensors.len()
            ));
        }
        for (name, t) in tensors {
            let id = policy
                .store
                .id(&name)
                .ok_or_else(|| format!("unexpected tensor `{name}`"))?;
            let slot = policy.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            *slot = t;
        }
        Ok(policy)
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameter counts grouped by layer/block and head.
    pub fn describe(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "dual attention network: {} layers, {} heads, leaky slope {}\n",
            c.layers(),
            c.heads,
            c.leaky_slope
        );
        let count = |prefix: &str| -> usize {
            self.store
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, t)| t.len())
                .sum()
        };
        for l in 0..c.layers() {
            let agg = if l + 1 == c.layers() { "mean" } else { "concat" };
            out += &format!(
                "  layer {}: op {} -> {}x{} ({agg}, out {}), {} params; machine {} -> {}x{} (c_kq width {}, out {}), {} params\n",
                l + 1,
                c.op_in(l),
                c.heads,
                c.op_dims[l],
                c.op_out(l),
                count(&format!("layer{l}.op.")),
                c.machine_in(l),
                c.heads,
                c.machine_dims[l],
                c.op_out(l),
                c.machine_out(l),
                count(&format!("layer{l}.machine.")),
            );
        }
        let hidden = vec![c.hidden.to_string(); c.hidden_layers].join("-");
        out += &format!(
            "  actor: {}-{hidden}-1 tanh, {} params\n",
            c.actor_in(),
            count("actor.")
        );
        out += &format!(
            "  critic: {}-{hidden}-1 tanh, {} params\n",
            c.global_dim(),
            count("critic.")
        );
        out += &format!("  total: {} params\n", self.num_parameters());
        out
    }
}

/// Padded neighbourhood table: row `r` owns slots `r*width .. (r+1)*width`.
#[derive(Debug, Clone)]
struct Slots {
    rows: usize,
    width: usize,
    owner: Vec<usize>,
    nbr: Vec<usize>,
    edge: Vec<usize>,
    mask: Vec<bool>,
}

/// Index structures for a stack of feature bundles.
#[derive(Debug, Clone)]
pub struct BatchIndex {
    pub states: usize,
    op_x: Tensor,
    machine_x: Tensor,
    pair_x: Tensor,
    op_slots: Slots,
    machine_slots: Slots,
    n_edges: usize,
    /// `(edge, op row)` pairs whose op features sum into `c_kq`.
    cand_edge: Vec<usize>,
    cand_op: Vec<usize>,
    op_state: Vec<usize>,
    machine_state: Vec<usize>,
    inv_op_count: Tensor,
    inv_machine_count: Tensor,
    action_op: Vec<usize>,
    action_machine: Vec<usize>,
    action_state: Vec<usize>,
    pub action_offsets: Vec<usize>,
    pub max_actions: usize,
    action_slot: Vec<usize>,
    pub action_mask: Vec<bool>,
}

impl BatchIndex {
    pub fn new(bundles: &[&FeatureBundle]) -> Self {
        assert!(!bundles.is_empty(), "empty batch");
        let mut op_rows = Vec::new();
        let mut machine_rows = Vec::new();
        let mut pair_rows = Vec::new();
        let (mut op_state, mut machine_state, mut action_state) = (Vec::new(), Vec::new(), Vec::new());
        let (mut action_op, mut action_machine) = (Vec::new(), Vec::new());
        let mut op_slots = Slots {
            rows: 0,
            width: 3,
            owner: vec![],
            nbr: vec![],
            edge: vec![],
            mask: vec![],
        };
        let (mut cand_edge, mut cand_op) = (Vec::new(), Vec::new());
        let mut edge_lists: Vec<Vec<(usize, usize)>> = Vec::new();
        let mut action_offsets = vec![0];
        let (mut op_off, mut m_off, mut e_off) = (0, 0, 0);
        let mut inv_op = Vec::new();
        let mut inv_m = Vec::new();

        for (b, bundle) in bundles.iter().enumerate() {
            let (n, m, a) = (bundle.num_ops(), bundle.num_machines(), bundle.num_actions());
            assert!(n > 0 && m > 0 && a > 0, "bundle without operations, machines or actions");
            op_rows.extend(bundle.op_feats.iter().map(|f| f.to_vec()));
            machine_rows.extend(bundle.machine_feats.iter().map(|f| f.to_vec()));
            pair_rows.extend(bundle.pair_feats.iter().map(|f| f.to_vec()));
            op_state.extend(std::iter::repeat_n(b, n));
            machine_state.extend(std::iter::repeat_n(b, m));
            action_state.extend(std::iter::repeat_n(b, a));
            inv_op.push(1.0 / n as f64);
            inv_m.push(1.0 / m as f64);
            for r in 0..n {
                let me = op_off + r;
                for nb in [bundle.pred[r], Some(r), bundle.succ[r]] {
                    op_slots.owner.push(me);
                    op_slots.nbr.push(nb.map_or(me, |x| op_off + x));
                    op_slots.edge.push(0);
                    op_slots.mask.push(nb.is_some());
                }
            }
            let mut lists = vec![Vec::new(); m];
            for (e, edge) in bundle.edges.iter().enumerate() {
                lists[edge.k].push((e_off + e, m_off + edge.q));
                for &o in &edge.candidates {
                    cand_edge.push(e_off + e);
                    cand_op.push(op_off + o);
                }
            }
            edge_lists.extend(lists);
            action_op.extend(bundle.action_op_row.iter().map(|&r| op_off + r));
            action_machine.extend(bundle.action_machine_row.iter().map(|&r| m_off + r));
            action_offsets.push(action_offsets[b] + a);
            op_off += n;
            m_off += m;
            e_off += bundle.edges.len();
        }
        op_slots.rows = op_off;

        let width = edge_lists.iter().map(Vec::len).max().unwrap_or(1);
        let mut machine_slots = Slots {
            rows: m_off,
            width,
            owner: vec![],
            nbr: vec![],
            edge: vec![],
            mask: vec![],
        };
        for (r, list) in edge_lists.iter().enumerate() {
            assert!(!list.is_empty(), "machine row without a self-edge");
            for s in 0..width {
                machine_slots.owner.push(r);
                let (e, q) = list.get(s).copied().unwrap_or((0, r));
                machine_slots.edge.push(e);
                machine_slots.nbr.push(q);
                machine_slots.mask.push(s < list.len());
            }
        }

        let states = bundles.len();
        let max_actions = (0..states)
            .map(|b| action_offsets[b + 1] - action_offsets[b])
            .max()
            .unwrap();
        let mut action_slot = Vec::with_capacity(states * max_actions);
        let mut action_mask = Vec::with_capacity(states * max_actions);
        for b in 0..states {
            for s in 0..max_actions {
                let idx = action_offsets[b] + s;
                let live = idx < action_offsets[b + 1];
                action_slot.push(if live { idx } else { 0 });
                action_mask.push(live);
            }
        }

        BatchIndex {
            states,
            op_x: Tensor::from_rows(&op_rows),
            machine_x: Tensor::from_rows(&machine_rows),
            pair_x: Tensor::from_rows(&pair_rows),
            op_slots,
            machine_slots,
            n_edges: e_off,
            cand_edge,
            cand_op,
            op_state,
            machine_state,
            inv_op_count: Tensor::column(inv_op),
            inv_machine_count: Tensor::column(inv_m),
            action_op,
            action_machine,
            action_state,
            action_offsets,
            max_actions,
            action_slot,
            action_mask,
        }
    }

    pub fn num_actions(&self, state: usize) -> usize {
        self.action_offsets[state + 1] - self.action_offsets[state]
    }
}

/// Embeddings of every layer, rows stacked across the batch.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub ops: Vec<Var>,
    pub machines: Vec<Var>,
    /// Pooled `[mean op ‖ mean machine]` of the last layer, one row per state.
    pub global: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub embeddings: Embeddings,
    /// Actor score `μ` of every action, stacked (`A x 1`).
    pub scores: Var,
    /// Log-probabilities padded to `states x max_actions`.
    pub log_probs: Var,
    /// Critic value per state (`states x 1`).
    pub values: Var,
}

fn attend(g: &mut Graph, slots: &Slots, src: Var, dst: Var, edge: Option<Var>, values: Var, slope: f64) -> Var {
    let s = g.gather_rows(src, &slots.owner);
    let t = g.gather_rows(dst, &slots.nbr);
    let mut e = g.add(s, t);
    if let Some(ev) = edge {
        let x = g.gather_rows(ev, &slots.edge);
        e = g.add(e, x);
    }
    let e = g.leaky_relu(e, slope);
    let e = g.reshape(e, slots.rows, slots.width);
    let alpha = g.masked_softmax(e, &slots.mask);
    let alpha = g.reshape(alpha, slots.rows * slots.width, 1);
    let v = g.gather_rows(values, &slots.nbr);
    let v = g.scale_rows(v, alpha);
    g.scatter_add_rows(v, &slots.owner, slots.rows)
}

/// Concatenation with `σ` per head, or mean over heads followed by `σ`.
fn aggregate(g: &mut Graph, heads: Vec<Var>, last: bool) -> Var {
    if last {
        let n = heads.len() as f64;
        let mut acc = heads[0];
        for &h in &heads[1..] {
            acc = g.add(acc, h);
        }
        let mean = g.scale(acc, 1.0 / n);
        g.elu(mean)
    } else {
        let act: Vec<Var> = heads.into_iter().map(|h| g.elu(h)).collect();
        if act.len() == 1 {
            act[0]
        } else {
            g.concat_cols(&act)
        }
    }
}

fn mlp(g: &mut Graph, store: &ParamStore, mut x: Var, layers: &[(ParamId, ParamId)]) -> Var {
    for (i, &(w, b)) in layers.iter().enumerate() {
        let wv = g.param(store, w);
        let bv = g.param(store, b);
        let y = g.matmul(x, wv);
        x = g.add_bias(y, bv);
        if i + 1 < layers.len() {
            x = g.tanh(x);
        }
    }
    x
}

impl Policy {
    /// Dual attention layers and pooling.
    pub fn embed(&self, g: &mut Graph, batch: &BatchIndex) -> Embeddings {
        let store = &self.store;
        let slope = self.config.leaky_slope;
        let mut h_op = g.constant(batch.op_x.clone());
        let mut h_m = g.constant(batch.machine_x.clone());
        let (mut ops, mut machines) = (Vec::new(), Vec::new());
        for (l, ids) in self.layers.iter().enumerate() {
            let last = l + 1 == self.layers.len();

            let mut heads = Vec::with_capacity(ids.op.len());
            for head in &ids.op {
                let w = g.param(store, head.w);
                let wh = g.matmul(h_op, w);
                let a1 = g.param(store, head.a_src);
                let a2 = g.param(store, head.a_dst);
                let src = g.matmul(wh, a1);
                let dst = g.matmul(wh, a2);
                heads.push(attend(g, &batch.op_slots, src, dst, None, wh, slope));
            }
            let new_op = aggregate(g, heads, last);

            // c_kq from this layer's operation outputs.
            let c = if batch.cand_op.is_empty() {
                g.constant(Tensor::zeros(batch.n_edges, self.config.op_out(l)))
            } else {
                let picked = g.gather_rows(new_op, &batch.cand_op);
                g.scatter_add_rows(picked, &batch.cand_edge, batch.n_edges)
            };
            let mut heads = Vec::with_capacity(ids.machine.len());
            for head in &ids.machine {
                let z1 = g.param(store, head.z1);
                let zh = g.matmul(h_m, z1);
                let z2 = g.param(store, head.z2);
                let zc = g.matmul(c, z2);
                let b1 = g.param(store, head.b_src);
                let b2 = g.param(store, head.b_dst);
                let b3 = g.param(store, head.b_edge);
                let src = g.matmul(zh, b1);
                let dst = g.matmul(zh, b2);
                let edge = g.matmul(zc, b3);
                heads.push(attend(g, &batch.machine_slots, src, dst, Some(edge), zh, slope));
            }
            let new_m = aggregate(g, heads, last);

            h_op = new_op;
            h_m = new_m;
            ops.push(h_op);
            machines.push(h_m);
        }

        let inv_o = g.constant(batch.inv_op_count.clone());
        let inv_m = g.constant(batch.inv_machine_count.clone());
        let so = g.scatter_add_rows(h_op, &batch.op_state, batch.states);
        let mo = g.scale_rows(so, inv_o);
        let sm = g.scatter_add_rows(h_m, &batch.machine_state, batch.states);
        let mm = g.scale_rows(sm, inv_m);
        let global = g.concat_cols(&[mo, mm]);
        Embeddings { ops, machines, global }
    }

    pub fn forward(&self, g: &mut Graph, batch: &BatchIndex) -> Forward {
        let embeddings = self.embed(g, batch);
        let (h_op, h_m) = (*embeddings.ops.last().unwrap(), *embeddings.machines.last().unwrap());

        let xo = g.gather_rows(h_op, &batch.action_op);
        let xm = g.gather_rows(h_m, &batch.action_machine);
        let xg = g.gather_rows(embeddings.global, &batch.action_state);
        let xp = g.constant(batch.pair_x.clone());
        let x = g.concat_cols(&[xo, xm, xg, xp]);
        let scores = mlp(g, &self.store, x, &self.actor);

        let padded = g.gather_rows(scores, &batch.action_slot);
        let padded = g.reshape(padded, batch.states, batch.max_actions);
        let log_probs = g.masked_log_softmax(padded, &batch.action_mask);

        let values = mlp(g, &self.store, embeddings.global, &self.critic);
        Forward {
            embeddings,
            scores,
            log_probs,
            values,
        }
    }

    /// Action distributions and values without keeping the tape.
    pub fn evaluate(&self, bundles: &[&FeatureBundle]) -> Vec<Decision> {
        let batch = BatchIndex::new(bundles);
        let mut g = Graph::new();
        let out = self.forward(&mut g, &batch);
        let lp = g.value(out.log_probs);
        let v = g.value(out.values);
        (0..batch.states)
            .map(|b| Decision {
                log_probs: lp.row(b)[..batch.num_actions(b)].to_vec(),
                value: v.get(b, 0),
            })
            .collect()
    }
}

/// Policy output for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// `log π(a|s)` in the bundle's action order.
    pub log_probs: Vec<f64>,
    pub value: f64,
}

impl Decision {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn entropy(&self) -> f64 {
        -self.log_probs.iter().map(|&l| l.exp() * l).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Sample,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "sample" => Ok(Strategy::Sample),
            _ => Err(format!("unknown strategy `{s}` (greedy|sample)")),
        }
    }
}

/// Picks an action index and returns it with its log-probability. Greedy
/// ties resolve to the lowest index.
pub fn select_action<R: Rng + ?Sized>(log_probs: &[f64], strategy: Strategy, rng: &mut R) -> (usize, f64) {
    assert!(!log_probs.is_empty(), "no actions to choose from");
    let idx = match strategy {
        Strategy::Greedy => {
            let mut best = 0;
            for (i, &l) in log_probs.iter().enumerate() {
                if l > log_probs[best] {
                    best = i;
                }
            }
            best
        }
        Strategy::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = log_probs.len() - 1;
            for (i, &l) in log_probs.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (idx, log_probs[idx])
}
