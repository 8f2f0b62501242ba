use std::path::Path;
use std::process::{Command, Output};

use fjsp_cli::commands::{cmd_eval, cmd_solve, RunArgs};
use fjsp_cli::io::{generate_dataset, list_dataset, load_instance};
use fjsp_core::oracle::SearchBudget;
use fjsp_core::Generator;
use fjsp_dan::train::{train, TrainConfig};
use fjsp_dan::{ModelConfig, Strategy};

fn fjsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fjsp")).args(args).output().expect("binary runs")
}

fn greedy() -> RunArgs {
    RunArgs {
        strategy: Strategy::Greedy,
        samples: 4,
        seed: None,
    }
}

fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
    let mut cfg = TrainConfig::standard(Generator::Sd2, 3, 2);
    cfg.episodes = 2;
    cfg.envs = 2;
    cfg.validate_every = 1;
    cfg.validation_size = 2;
    cfg.model = ModelConfig {
        op_dims: vec![4, 4],
        machine_dims: vec![4, 4],
        hidden: 8,
        ..ModelConfig::default()
    };
    train(&cfg, dir, false, &mut |_| {}).unwrap().best_checkpoint
}

#[test]
fn generate_is_reproducible_and_prefix_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_dataset(Generator::Sd1, 4, 3, 5, 9, &dir.path().join("a")).unwrap();
    let b = generate_dataset(Generator::Sd1, 4, 3, 3, 9, &dir.path().join("b")).unwrap();
    assert_eq!(a.instances[..3], b.instances[..]);
    let files = list_dataset(&dir.path().join("a")).unwrap();
    assert_eq!(files.len(), 5);
    for f in &files {
        let from_fjs = load_instance(f).unwrap();
        let from_json = load_instance(&f.with_extension("json")).unwrap();
        assert_eq!(from_fjs, from_json);
    }
}

#[test]
fn eval_reports_gaps_against_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(Generator::Sd2, 2, 2, 3, 1, &data).unwrap();
    let policies = vec!["spt".to_string(), "mwkr".to_string()];
    let r = cmd_eval(&data, &policies, &greedy(), Some("oracle"), &SearchBudget::default(), vec![]).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert!(r.warnings.is_empty());
    assert!(r.rows.iter().all(|row| row.gap.unwrap() >= 0.0));
    assert_eq!(r.provenance.instances.len(), 3);
    assert!(r.provenance.manifest.is_some());
    r.write(&dir.path().join("out")).unwrap();
    for f in ["rows.csv", "summary.csv", "report.json"] {
        assert!(dir.path().join("out").join(f).exists());
    }
}

#[test]
fn eval_without_reference_warns_and_omits_gaps() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(Generator::Sd2, 3, 2, 2, 1, dir.path()).unwrap();
    let r = cmd_eval(dir.path(), &["fifo".to_string()], &greedy(), None, &SearchBudget::default(), vec![]).unwrap();
    assert!(!r.warnings.is_empty());
    assert!(r.aggregates.iter().all(|a| a.mean_gap.is_none()));

    let csv = dir.path().join("best.csv");
    std::fs::write(&csv, "instance,best_known\nsd2_3x2_0000,100\n").unwrap();
    let r = cmd_eval(dir.path(), &["fifo".to_string()], &greedy(), csv.to_str(), &SearchBudget::default(), vec![]).unwrap();
    assert_eq!(r.warnings.len(), 1);
    assert!(r.rows[0].gap.is_some() && r.rows[1].gap.is_none());
}

#[test]
fn stochastic_runs_need_a_seed_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(Generator::Sd2, 4, 3, 3, 2, dir.path()).unwrap();
    let files = list_dataset(dir.path()).unwrap();
    assert!(cmd_solve(&files, "random", &greedy(), None, None, vec![]).is_err());
    let seeded = RunArgs {
        seed: Some(5),
        ..greedy()
    };
    let a = cmd_solve(&files, "random", &seeded, None, None, vec![]).unwrap();
    let b = cmd_solve(&files, "random", &seeded, None, None, vec![]).unwrap();
    let ms = |r: &fjsp_cli::report::EvalReport| r.rows.iter().map(|x| x.makespan).collect::<Vec<_>>();
    assert_eq!(ms(&a), ms(&b));
}

#[test]
fn learned_policy_solves_and_traces_replay() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(&dir.path().join("run"));
    let data = dir.path().join("data");
    generate_dataset(Generator::Sd2, 5, 3, 2, 3, &data).unwrap();
    let files = list_dataset(&data).unwrap();
    let traces = dir.path().join("traces");
    let sampling = RunArgs {
        strategy: Strategy::Sample,
        samples: 4,
        seed: Some(1),
    };
    let r = cmd_solve(&files, ckpt.to_str().unwrap(), &sampling, None, Some(&traces), vec![]).unwrap();
    assert_eq!(r.provenance.checkpoints.len(), 1);
    assert!(r.provenance.config_sha256.is_some());
    let g = cmd_solve(&files, ckpt.to_str().unwrap(), &greedy(), None, None, vec![]).unwrap();
    for (s, g) in r.rows.iter().zip(&g.rows) {
        assert!(s.makespan <= g.makespan);
    }
    for (f, row) in files.iter().zip(&r.rows) {
        let name = f.file_stem().unwrap().to_string_lossy();
        let text = std::fs::read_to_string(traces.join(format!("{name}.trace.json"))).unwrap();
        let trace: fjsp_core::env::RolloutTrace = serde_json::from_str(&text).unwrap();
        let end = trace.replay(&load_instance(f).unwrap()).unwrap();
        assert_eq!(end.extract_schedule().makespan, row.makespan);
    }
}

#[test]
fn binary_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let data = format!("{d}/data");
    let out = fjsp(&["generate", "--generator", "sd2", "--jobs", "3", "--machines", "2", "--count", "2", "--seed", "4", "--out", &data]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let inst = format!("{data}/sd2_3x2_0000.fjs");
    let out = fjsp(&["solve", &inst, "--policy", "mwkr", "--gantt-dir", &format!("{d}/gantt")]);
    assert!(out.status.success());
    let gantt = std::fs::read_to_string(format!("{d}/gantt/sd2_3x2_0000.csv")).unwrap();
    assert!(gantt.starts_with("operation,job,machine,start,end"));

    let out = fjsp(&["eval", &data, "--policy", "spt", "--reference", "oracle", "--out", &format!("{d}/eval")]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("spt"));

    let out = fjsp(&["oracle", &inst]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("proven"));

    let out = fjsp(&["features", "dump", &inst]);
    let bundle: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(bundle["actions"].as_array().is_some_and(|a| !a.is_empty()));

    let out = fjsp(&["config", "template", "--jobs", "6", "--machines", "3"]);
    let cfg = TrainConfig::parse(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!((cfg.jobs, cfg.machines, cfg.episodes), (6, 3, 1000));

    assert!(fjsp(&["model", "describe"]).status.success());
}

#[test]
fn binary_reports_errors_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.fjs");
    std::fs::write(&bad, "2 2\n1 1 1 5\n").unwrap();
    let out = fjsp(&["solve", bad.to_str().unwrap(), "--policy", "spt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 jobs"));

    let out = fjsp(&["solve", bad.to_str().unwrap(), "--policy", "nonsense"]);
    assert!(!out.status.success());

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "episodes = 3\n").unwrap();
    let out = fjsp(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing field"));
}
