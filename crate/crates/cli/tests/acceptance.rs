//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.
//!
//! Validation, exhaustive optima and gradients are computed here by code
//! that shares nothing with the implementations under test.

use std::collections::HashMap;
use std::time::Instant;

use fjsp_autodiff::Graph;
use fjsp_core::fjs::{parse_fjs, write_fjs};
use fjsp_core::instance::{gen_sd1, gen_sd2};
use fjsp_core::oracle::{solve_exact, SearchBudget};
use fjsp_core::pdr::{PdrPolicy, Rule, TieBreak};
use fjsp_core::{build_bundle, rollout, Action, FeatureBundle, FjspInstance, ScheduleResult, ScheduleState, Time};
use fjsp_dan::model::{BatchIndex, ModelConfig};
use fjsp_dan::ppo::{build_loss, prepare_samples, PpoParams};
use fjsp_dan::rollout::run_episodes;
use fjsp_dan::train::{train, TrainConfig};
use fjsp_dan::{load_policy, solve_greedy, solve_sampling, Policy, Strategy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
    seconds: f64,
}

fn outcome(pass: bool, detail: String, started: Instant) -> Outcome {
    Outcome {
        pass,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Checks a finished schedule from the raw instance data: every operation
/// exactly once, on an eligible machine with its processing time, after its
/// job predecessor, with no two intervals on a machine overlapping, and the
/// reported makespan equal to the last completion.
fn violations(inst: &FjspInstance, s: &ScheduleResult) -> Vec<String> {
    let mut errs = Vec::new();
    let mut seen: HashMap<(usize, usize), (Time, Time)> = HashMap::new();
    let mut per_machine: Vec<Vec<(Time, Time)>> = vec![Vec::new(); inst.num_machines];
    for o in &s.ops {
        let Some(spec) = inst.jobs.get(o.job).and_then(|j| j.operations.get(o.operation)) else {
            errs.push(format!("unknown operation ({}, {})", o.job, o.operation));
            continue;
        };
        match spec.eligible.iter().find(|&&(k, _)| k == o.machine) {
            None => errs.push(format!("O{},{} on ineligible machine {}", o.job, o.operation, o.machine)),
            Some(&(_, p)) if o.end - o.start != p => {
                errs.push(format!("O{},{} lasts {} instead of {p}", o.job, o.operation, o.end - o.start))
            }
            _ => {}
        }
        if o.start < 0 {
            errs.push(format!("O{},{} starts before 0", o.job, o.operation));
        }
        if seen.insert((o.job, o.operation), (o.start, o.end)).is_some() {
            errs.push(format!("O{},{} scheduled twice", o.job, o.operation));
        }
        if o.machine < inst.num_machines {
            per_machine[o.machine].push((o.start, o.end));
        }
    }
    for (j, job) in inst.jobs.iter().enumerate() {
        for i in 0..job.operations.len() {
            match seen.get(&(j, i)) {
                None => errs.push(format!("O{j},{i} missing")),
                Some(&(start, _)) if i > 0 => {
                    if let Some(&(_, prev_end)) = seen.get(&(j, i - 1)) {
                        if start < prev_end {
                            errs.push(format!("O{j},{i} starts before its predecessor ends"));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    for (k, iv) in per_machine.iter_mut().enumerate() {
        iv.sort();
        for w in iv.windows(2) {
            if w[1].0 < w[0].1 {
                errs.push(format!("overlap on machine {k}"));
            }
        }
    }
    let last = s.ops.iter().map(|o| o.end).max().unwrap_or(0);
    if last != s.makespan {
        errs.push(format!("makespan {} but last completion {last}", s.makespan));
    }
    errs
}

fn random_instance(rng: &mut ChaCha8Rng, max_jobs: usize, max_machines: usize) -> FjspInstance {
    let n = rng.gen_range(1..=max_jobs);
    let m = rng.gen_range(2..=max_machines);
    if rng.gen_bool(0.5) {
        gen_sd1(n, m, rng)
    } else {
        gen_sd2(n, m, rng)
    }
}

fn random_policy(rng: &mut ChaCha8Rng) -> impl FnMut(&ScheduleState) -> Action + '_ {
    move |s: &ScheduleState| {
        let legal = s.legal_actions();
        legal[rng.gen_range(0..legal.len())]
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn telescoping() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut bad = 0;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng, 10, 5);
        let start = ScheduleState::reset(&inst).unwrap();
        let lb0 = start.initial_estimate();
        let mut pick = ChaCha8Rng::seed_from_u64(rng.gen());
        let (end, rewards) = rollout(start, random_policy(&mut pick));
        let total: Time = rewards.iter().sum();
        if total != lb0 - end.extract_schedule().makespan {
            bad += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        bad == 0 && secs < 60.0,
        format!("{bad} mismatches in 1000 rollouts, {secs:.1}s"),
        started,
    )
}

fn monotonicity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut bad = 0;
    let mut steps = 0;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng, 10, 5);
        let mut state = ScheduleState::reset(&inst).unwrap();
        let mut pick = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut policy = random_policy(&mut pick);
        while !state.is_done() {
            let before = state.estimated_makespan();
            let a = policy(&state);
            let out = state.step(a).unwrap();
            steps += 1;
            if out.reward > 0 || state.estimated_makespan() < before {
                bad += 1;
            }
        }
    }
    outcome(bad == 0, format!("{bad} violations over {steps} steps"), started)
}

/// Exhaustive optimum: every machine choice and every dispatch order, each
/// operation appended at the earliest time after its job predecessor and
/// the last operation of its machine. An optimal schedule ordered by start
/// time is reproduced this way, so the minimum is the true optimum.
fn brute_force(inst: &FjspInstance) -> Time {
    fn go(inst: &FjspInstance, next: &mut [usize], job_end: &mut [Time], mach_end: &mut [Time], cmax: Time, best: &mut Time) {
        if cmax >= *best {
            return;
        }
        let mut done = true;
        for j in 0..inst.jobs.len() {
            let i = next[j];
            if i == inst.jobs[j].operations.len() {
                continue;
            }
            done = false;
            for &(k, p) in &inst.jobs[j].operations[i].eligible {
                let (je, me) = (job_end[j], mach_end[k]);
                let end = je.max(me) + p;
                next[j] += 1;
                job_end[j] = end;
                mach_end[k] = end;
                go(inst, next, job_end, mach_end, cmax.max(end), best);
                next[j] -= 1;
                job_end[j] = je;
                mach_end[k] = me;
            }
        }
        if done {
            *best = (*best).min(cmax);
        }
    }
    let mut best = Time::MAX;
    go(
        inst,
        &mut vec![0; inst.jobs.len()],
        &mut vec![0; inst.jobs.len()],
        &mut vec![0; inst.num_machines],
        0,
        &mut best,
    );
    best
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut checked = 0;
    let mut bad = Vec::new();
    while checked < 50 {
        let inst = random_instance(&mut rng, 4, 4);
        if inst.num_operations() > 8 {
            continue;
        }
        checked += 1;
        let r = solve_exact(
            &inst,
            SearchBudget {
                nodes: u64::MAX,
                time: None,
            },
        );
        let truth = brute_force(&inst);
        if !r.proven || r.makespan != truth || !violations(&inst, &r.schedule).is_empty() {
            bad.push(format!("{} vs {truth} (proven {})", r.makespan, r.proven));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        bad.is_empty() && secs < 300.0,
        format!("{checked} instances, {} mismatches {:?}, {secs:.1}s", bad.len(), bad),
        started,
    )
}

fn central_difference_gradients() -> Outcome {
    let started = Instant::now();
    let policy = Policy::new(ModelConfig::default(), 303);
    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let insts: Vec<FjspInstance> = (0..2).map(|_| gen_sd2(3, 2, &mut rng)).collect();
    let trajs = run_episodes(&policy, &insts, Strategy::Sample, &mut rng, true);
    let mut samples = prepare_samples(&trajs, 1.0, 0.98, true, true);
    // Every other decision: six states drawn from both episodes.
    samples = samples.into_iter().step_by(2).collect();
    // Shift the behaviour log-probs so the clip is active on some samples.
    for s in &mut samples {
        s.old_log_prob += rng.gen_range(-0.4..0.4);
    }
    let p = PpoParams {
        epochs: 4,
        clip: 0.2,
        policy_coef: 1.0,
        value_coef: 0.5,
        entropy_coef: 0.01,
    };
    let loss = build_loss(&policy, &samples, &p);
    let grads = loss.graph.backward(loss.total).param_grads(&policy.store);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = policy.clone();
    for id in policy.store.ids() {
        for e in 0..policy.store.get(id).len() {
            let x = policy.store.get(id).data()[e];
            let mut eval = |v: f64| {
                probe.store.get_mut(id).data_mut()[e] = v;
                let l = build_loss(&probe, &samples, &p);
                l.graph.value(l.total).item()
            };
            let numeric = (eval(x + h) - eval(x - h)) / (2.0 * h);
            eval(x);
            let a = grads[id.index()].data()[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        samples.len() >= 5 && worst < 1e-4 && secs < 120.0,
        format!(
            "{} states, {checked} parameters, max relative error {worst:.2e}, {secs:.1}s",
            samples.len()
        ),
        started,
    )
}

struct Views {
    ops: fjsp_autodiff::Tensor,
    machines: fjsp_autodiff::Tensor,
    global: Vec<f64>,
    value: f64,
    scores: Vec<f64>,
}

fn views(policy: &Policy, b: &FeatureBundle) -> Views {
    let batch = BatchIndex::new(&[b]);
    let mut g = Graph::new();
    let f = policy.forward(&mut g, &batch);
    Views {
        ops: g.value(*f.embeddings.ops.last().unwrap()).clone(),
        machines: g.value(*f.embeddings.machines.last().unwrap()).clone(),
        global: g.value(f.embeddings.global).data().to_vec(),
        value: g.value(f.values).item(),
        scores: g.value(f.scores).data().to_vec(),
    }
}

fn equivariance() -> Outcome {
    let started = Instant::now();
    let tol = 1e-12;
    let close = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0);
    let policy = Policy::new(ModelConfig::default(), 505);
    let mut rng = ChaCha8Rng::seed_from_u64(506);
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    let mut states = 0;
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 6, 4);
        let n = inst.num_jobs;
        let m = inst.num_machines;
        let mut jp: Vec<usize> = (0..n).collect();
        let mut mp: Vec<usize> = (0..m).collect();
        jp.shuffle(&mut rng);
        mp.shuffle(&mut rng);
        let other = inst.permute_jobs(&jp).relabel_machines(&mp);
        let mut inv = vec![0; n];
        for (new, &old) in jp.iter().enumerate() {
            inv[old] = new;
        }
        let mut a = ScheduleState::reset(&inst).unwrap();
        let mut b = ScheduleState::reset(&other).unwrap();
        let map_op = |a: &ScheduleState, b: &ScheduleState, op: usize| {
            let sa = a.shop();
            let job = (0..n).find(|&j| sa.job_ops(j).contains(&op)).unwrap();
            let idx = op - sa.job_ops(job).start;
            b.shop().global_id(inv[job], idx).unwrap()
        };
        while !a.is_done() {
            states += 1;
            let ba = build_bundle(&a);
            let bb = build_bundle(&b);
            let va = views(&policy, &ba);
            let vb = views(&policy, &bb);
            let mut diffs = Vec::new();
            for (ra, &op) in ba.op_ids.iter().enumerate() {
                let target = map_op(&a, &b, op);
                let rb = bb.op_ids.iter().position(|&x| x == target).unwrap();
                diffs.extend(va.ops.row(ra).iter().zip(vb.ops.row(rb)).map(|(x, y)| (*x, *y)));
            }
            for (ra, &k) in ba.machine_ids.iter().enumerate() {
                let rb = bb.machine_ids.iter().position(|&x| x == mp[k]).unwrap();
                diffs.extend(va.machines.row(ra).iter().zip(vb.machines.row(rb)).map(|(x, y)| (*x, *y)));
            }
            diffs.extend(va.global.iter().zip(&vb.global).map(|(x, y)| (*x, *y)));
            diffs.push((va.value, vb.value));
            let (mut sa, mut sb) = (va.scores.clone(), vb.scores.clone());
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            if sa.len() != sb.len() {
                bad += 1;
            }
            diffs.extend(sa.into_iter().zip(sb));
            for (x, y) in diffs {
                worst = worst.max((x - y).abs());
                if !close(x, y) {
                    bad += 1;
                }
            }
            let act = ba.actions[rng.gen_range(0..ba.actions.len())];
            let mapped = Action {
                op: map_op(&a, &b, act.op),
                machine: mp[act.machine],
            };
            a.step(act).unwrap();
            b.step(mapped).unwrap();
        }
        if a.extract_schedule().makespan != b.extract_schedule().makespan {
            bad += 1;
        }
    }
    outcome(
        bad == 0,
        format!("{states} states, {bad} mismatches, max abs difference {worst:.1e}"),
        started,
    )
}

struct Trained {
    policy: Policy,
    untrained: Policy,
}

fn test_instances(n: usize, m: usize, seed: u64, count: usize) -> Vec<FjspInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_sd2(n, m, &mut rng)).collect()
}

fn greedy_mean(policy: &Policy, insts: &[FjspInstance]) -> f64 {
    mean(insts.iter().map(|i| solve_greedy(policy, i).makespan() as f64))
}

fn desk_learning(dir: &std::path::Path) -> (Outcome, Option<Trained>) {
    let started = Instant::now();
    let mut cfg = TrainConfig::standard(fjsp_core::Generator::Sd2, 6, 3);
    cfg.episodes = 200;
    cfg.seed = 0;
    cfg.validation_size = 50;
    cfg.validation_seed = 777;
    let untrained = Policy::new(cfg.model.clone(), cfg.seed);
    let result = train(&cfg, dir, false, &mut |row| {
        if let Some(v) = row.val_makespan {
            eprintln!("  episode {:>3}  validation {v:.2}", row.episode);
        }
    });
    let out = match result {
        Ok(o) => o,
        Err(e) => return (outcome(false, format!("training failed: {e}"), started), None),
    };
    let (policy, _) = load_policy(&out.best_checkpoint).expect("best checkpoint loads");
    let held_out = test_instances(6, 3, 4242, 50);
    let pdr: Vec<(Rule, f64)> = Rule::ALL
        .iter()
        .map(|&rule| {
            let m = mean(held_out.iter().map(|inst| {
                let mut p = PdrPolicy::new(rule, TieBreak::Lexicographic);
                let (end, _) = rollout(ScheduleState::reset(inst).unwrap(), |s| p.action(s));
                end.extract_schedule().makespan as f64
            }));
            (rule, m)
        })
        .collect();
    let (best_rule, best_pdr) = pdr.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let trained = greedy_mean(&policy, &held_out);
    let before = greedy_mean(&untrained, &held_out);
    let secs = started.elapsed().as_secs_f64();
    let pass = trained <= best_pdr * 1.02 && trained <= before * 0.95 && secs < 45.0 * 60.0;
    (
        outcome(
            pass,
            format!(
                "{} episodes: trained {trained:.2}, best rule {best_rule} {best_pdr:.2} (limit {:.2}), untrained {before:.2} ({:.1}% better), {secs:.0}s",
                cfg.episodes,
                best_pdr * 1.02,
                100.0 * (1.0 - trained / before)
            ),
            started,
        ),
        Some(Trained { policy, untrained }),
    )
}

fn validity(trained: Option<&Trained>) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut schedules = 0;
    let mut bad = Vec::new();
    let mut check = |label: &str, inst: &FjspInstance, s: &ScheduleResult| {
        schedules += 1;
        let v = violations(inst, s);
        if !v.is_empty() {
            bad.push(format!("{label}: {}", v[0]));
        }
    };
    for round in 0..30 {
        let inst = random_instance(&mut rng, 10, 5);
        for rule in Rule::ALL {
            for tie in [TieBreak::Lexicographic, TieBreak::Seeded(round)] {
                let mut p = PdrPolicy::new(rule, tie);
                let (end, _) = rollout(ScheduleState::reset(&inst).unwrap(), |s| p.action(s));
                check(&rule.to_string(), &inst, &end.extract_schedule());
            }
        }
        let mut pick = ChaCha8Rng::seed_from_u64(round);
        let (end, _) = rollout(ScheduleState::reset(&inst).unwrap(), random_policy(&mut pick));
        check("random", &inst, &end.extract_schedule());
        if let Some(t) = trained {
            for (label, p) in [("trained", &t.policy), ("untrained", &t.untrained)] {
                check(label, &inst, &solve_greedy(p, &inst).schedule);
                check(label, &inst, &solve_sampling(p, &inst, 4, &mut pick).schedule);
            }
        }
        if inst.num_operations() <= 10 {
            let r = solve_exact(&inst, SearchBudget::default());
            check("oracle", &inst, &r.schedule);
        }
    }
    let pass = bad.is_empty() && trained.is_some();
    outcome(
        pass,
        format!(
            "{schedules} schedules, {} invalid{}",
            bad.len(),
            if trained.is_some() { "" } else { " (learned policy unavailable)" }
        ),
        started,
    )
}

fn sampling_dominance(trained: Option<&Trained>) -> Outcome {
    let started = Instant::now();
    let Some(t) = trained else {
        return outcome(false, "learned policy unavailable".into(), started);
    };
    let insts = test_instances(6, 3, 707, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(708);
    let mut bad = 0;
    let mut strictly = 0;
    for inst in &insts {
        let g = solve_greedy(&t.policy, inst).makespan();
        let s = solve_sampling(&t.policy, inst, 16, &mut rng).makespan();
        bad += usize::from(s > g);
        strictly += usize::from(s < g);
    }
    outcome(
        bad == 0,
        format!("{} instances, {bad} where sampling lost, {strictly} strictly improved", insts.len()),
        started,
    )
}

fn size_transfer(trained: Option<&Trained>) -> Outcome {
    let started = Instant::now();
    let Some(t) = trained else {
        return outcome(false, "learned policy unavailable".into(), started);
    };
    let insts = test_instances(12, 6, 808, 50);
    let mut invalid = 0;
    let mut learned = Vec::new();
    let mut random = Vec::new();
    for (i, inst) in insts.iter().enumerate() {
        let s = solve_greedy(&t.policy, inst).schedule;
        invalid += usize::from(!violations(inst, &s).is_empty());
        learned.push(s.makespan as f64);
        let mut pick = ChaCha8Rng::seed_from_u64(809 + i as u64);
        let (end, _) = rollout(ScheduleState::reset(inst).unwrap(), random_policy(&mut pick));
        random.push(end.extract_schedule().makespan as f64);
    }
    let (l, r) = (mean(learned), mean(random));
    outcome(
        invalid == 0 && l <= 0.9 * r,
        format!(
            "12x6: learned greedy {l:.2}, random {r:.2} ({:.1}% better), {invalid} invalid",
            100.0 * (1.0 - l / r)
        ),
        started,
    )
}

fn format_fidelity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut bad = 0;
    for _ in 0..100 {
        let inst = random_instance(&mut rng, 15, 10);
        let text = write_fjs(&inst);
        match parse_fjs(&text) {
            Ok(back) => bad += usize::from(back != inst || write_fjs(&back) != text),
            Err(_) => bad += 1,
        }
    }
    // Benchmark-style layout: header with a fractional flexibility field,
    // irregular spacing and a trailing blank line.
    let sample = "2   3   1.5\n2  1  1 4   2  2 3  3 5\n3  1 2 2  2 1 6 3 3  1 3 1\n\n";
    let mut benchmark_ok = matches!(parse_fjs(sample), Ok(i) if i.num_jobs == 2 && i.num_machines == 3
        && i.jobs[0].operations.len() == 2 && i.jobs[1].operations.len() == 3);
    benchmark_ok &= parse_fjs("3 2\n1 1 1 5\n1 1 2 4\n").is_err();
    let mut files = 0;
    if let Ok(dir) = std::env::var("FJSP_BENCHMARK_DIR") {
        for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "fjs" || e == "txt") {
                files += 1;
                let ok = std::fs::read_to_string(&path).ok().and_then(|t| parse_fjs(&t).ok()).is_some_and(|i| {
                    i.jobs.len() == i.num_jobs && parse_fjs(&write_fjs(&i)).as_ref() == Ok(&i)
                });
                benchmark_ok &= ok;
            }
        }
    }
    outcome(
        bad == 0 && benchmark_ok,
        format!("100 round trips, {bad} mismatches; benchmark layout ok: {benchmark_ok}; {files} user files"),
        started,
    )
}

fn main() {
    let total = Instant::now();
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        eprintln!("[{id}] {name} ...");
        let o = f();
        eprintln!("[{id}] {} ({:.1}s)", if o.pass { "pass" } else { "FAIL" }, o.seconds);
        results.push((id, name, o));
    };
    run(1, "telescoping reward identity", &mut telescoping);
    run(3, "gradient correctness", &mut central_difference_gradients);
    run(4, "oracle equivalence", &mut oracle_equivalence);
    run(5, "equivariance", &mut equivariance);
    let mut trained = None;
    run(6, "desk-scale learning", &mut || {
        let (o, t) = desk_learning(dir.path());
        trained = t;
        o
    });
    run(2, "schedule validity", &mut || validity(trained.as_ref()));
    run(7, "sampling dominance", &mut || sampling_dominance(trained.as_ref()));
    run(8, "size transfer", &mut || size_transfer(trained.as_ref()));
    run(9, "format fidelity", &mut format_fidelity);
    run(10, "monotonicity", &mut monotonicity);

    results.sort_by_key(|r| r.0);
    println!();
    for (id, name, o) in &results {
        println!(
            "{} {id:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            o.seconds
        );
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
