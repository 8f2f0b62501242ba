//! Problem data model for the flexible job-shop scheduling problem.
//!
//! An instance is a set of jobs, each a linear chain of operations. Every
//! operation can run on any machine of its eligible set, with a
//! machine-dependent processing time. Machine indices are 0-based here; the
//! `.fjs` reader and writer translate to the 1-based file convention.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Integer time unit used throughout the scheduling environment.
pub type Time = i64;

/// One operation: the machines able to process it and the time each takes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationSpec {
    /// `(machine, processing time)` pairs, sorted by machine.
    pub eligible: Vec<(usize, Time)>,
}

impl OperationSpec {
    pub fn new(mut eligible: Vec<(usize, Time)>) -> Self {
        eligible.sort_unstable();
        OperationSpec { eligible }
    }

    pub fn time_on(&self, machine: usize) -> Option<Time> {
        self.eligible
            .iter()
            .find(|&&(m, _)| m == machine)
            .map(|&(_, p)| p)
    }

    pub fn min_time(&self) -> Time {
        self.eligible.iter().map(|&(_, p)| p).min().unwrap_or(0)
    }

    pub fn max_time(&self) -> Time {
        self.eligible.iter().map(|&(_, p)| p).max().unwrap_or(0)
    }

    pub fn mean_time(&self) -> f64 {
        if self.eligible.is_empty() {
            return 0.0;
        }
        self.eligible.iter().map(|&(_, p)| p as f64).sum::<f64>() / self.eligible.len() as f64
    }
}

/// A job is an ordered chain of operations; order is the precedence relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub operations: Vec<OperationSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FjspInstance {
    pub num_jobs: usize,
    pub num_machines: usize,
    pub jobs: Vec<Job>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    NoJobs,
    NoMachines,
    JobCountMismatch { declared: usize, actual: usize },
    EmptyJob,
    EmptyMachineSet,
    MachineOutOfRange { machine: usize },
    DuplicateMachine { machine: usize },
    NonPositiveTime { machine: usize, time: Time },
}

/// A broken instance invariant. Coordinates are 1-based for display.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub job: Option<usize>,
    pub operation: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = match (self.job, self.operation) {
            (Some(j), Some(o)) => format!(" at ({},{})", j + 1, o + 1),
            (Some(j), None) => format!(" at job {}", j + 1),
            _ => String::new(),
        };
        match &self.kind {
            ViolationKind::NoJobs => write!(f, "instance has no jobs"),
            ViolationKind::NoMachines => write!(f, "instance has no machines"),
            ViolationKind::JobCountMismatch { declared, actual } => {
                write!(f, "declared {declared} jobs but found {actual}")
            }
            ViolationKind::EmptyJob => write!(f, "job without operations{at}"),
            ViolationKind::EmptyMachineSet => write!(f, "empty machine set{at}"),
            ViolationKind::MachineOutOfRange { machine } => {
                write!(f, "machine index {} out of range{at}", machine + 1)
            }
            ViolationKind::DuplicateMachine { machine } => {
                write!(f, "machine {} listed twice{at}", machine + 1)
            }
            ViolationKind::NonPositiveTime { machine, time } => {
                write!(f, "non-positive time {time} on machine {}{at}", machine + 1)
            }
        }
    }
}

impl FjspInstance {
    pub fn new(num_machines: usize, jobs: Vec<Job>) -> Self {
        FjspInstance {
            num_jobs: jobs.len(),
            num_machines,
            jobs,
        }
    }

    /// Total number of operations `|O|`.
    pub fn num_operations(&self) -> usize {
        self.jobs.iter().map(|j| j.operations.len()).sum()
    }

    pub fn operations(&self) -> impl Iterator<Item = (usize, usize, &OperationSpec)> {
        self.jobs.iter().enumerate().flat_map(|(j, job)| {
            job.operations
                .iter()
                .enumerate()
                .map(move |(o, spec)| (j, o, spec))
        })
    }

    /// Mean size of the eligible machine sets, as written in the `.fjs` header.
    pub fn average_flexibility(&self) -> f64 {
        let ops = self.num_operations();
        if ops == 0 {
            return 0.0;
        }
        let total: usize = self.operations().map(|(_, _, s)| s.eligible.len()).sum();
        total as f64 / ops as f64
    }

    /// Checks every structural invariant, reporting all violations found.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let global = |kind| Violation {
            job: None,
            operation: None,
            kind,
        };
        if self.jobs.is_empty() {
            out.push(global(ViolationKind::NoJobs));
        }
        if self.num_machines == 0 {
            out.push(global(ViolationKind::NoMachines));
        }
        if self.num_jobs != self.jobs.len() {
            out.push(global(ViolationKind::JobCountMismatch {
                declared: self.num_jobs,
                actual: self.jobs.len(),
            }));
        }
        for (j, job) in self.jobs.iter().enumerate() {
            if job.operations.is_empty() {
                out.push(Violation {
                    job: Some(j),
                    operation: None,
                    kind: ViolationKind::EmptyJob,
                });
            }
            for (o, spec) in job.operations.iter().enumerate() {
                let mut push = |kind| {
                    out.push(Violation {
                        job: Some(j),
                        operation: Some(o),
                        kind,
                    })
                };
                if spec.eligible.is_empty() {
                    push(ViolationKind::EmptyMachineSet);
                }
                let mut seen = vec![false; self.num_machines];
                for &(machine, time) in &spec.eligible {
                    if machine >= self.num_machines {
                        push(ViolationKind::MachineOutOfRange { machine });
                    } else if seen[machine] {
                        push(ViolationKind::DuplicateMachine { machine });
                    } else {
                        seen[machine] = true;
                    }
                    if time <= 0 {
                        push(ViolationKind::NonPositiveTime { machine, time });
                    }
                }
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// Returns a copy with jobs reordered so that new job `i` is old job `perm[i]`.
    pub fn permute_jobs(&self, perm: &[usize]) -> FjspInstance {
        assert_eq!(perm.len(), self.jobs.len(), "job permutation length");
        FjspInstance::new(
            self.num_machines,
            perm.iter().map(|&i| self.jobs[i].clone()).collect(),
        )
    }

    /// Returns a copy with machine `k` renamed to `perm[k]`.
    pub fn relabel_machines(&self, perm: &[usize]) -> FjspInstance {
        assert_eq!(perm.len(), self.num_machines, "machine permutation length");
        let jobs = self
            .jobs
            .iter()
            .map(|job| Job {
                operations: job
                    .operations
                    .iter()
                    .map(|s| OperationSpec::new(s.eligible.iter().map(|&(m, p)| (perm[m], p)).collect()))
                    .collect(),
            })
            .collect();
        FjspInstance::new(self.num_machines, jobs)
    }
}

/// Synthetic instance families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Sd1,
    Sd2,
}

impl Generator {
    /// Version tag stored alongside generated instances.
    pub fn version_tag(self) -> &'static str {
        match self {
            Generator::Sd1 => "sd1-v1",
            Generator::Sd2 => "sd2-v1",
        }
    }

    pub fn generate<R: Rng + ?Sized>(self, n: usize, m: usize, rng: &mut R) -> FjspInstance {
        match self {
            Generator::Sd1 => gen_sd1(n, m, rng),
            Generator::Sd2 => gen_sd2(n, m, rng),
        }
    }
}

impl std::str::FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sd1" => Ok(Generator::Sd1),
            "sd2" => Ok(Generator::Sd2),
            other => Err(format!("unknown generator `{other}` (expected sd1 or sd2)")),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Sd1 => "sd1",
            Generator::Sd2 => "sd2",
        })
    }
}

fn random_operation<R: Rng + ?Sized>(m: usize, max_time: Time, rng: &mut R) -> OperationSpec {
    let size = rng.gen_range(1..=m);
    let machines = index::sample(rng, m, size);
    let eligible = machines
        .into_iter()
        .map(|k| (k, rng.gen_range(1..=max_time)))
        .collect();
    OperationSpec::new(eligible)
}

/// Every job has `m` operations; `|M_ij| ~ U[1,m]`, `p ~ U[1,99]`.
pub fn gen_sd2<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> FjspInstance {
    assert!(n >= 1 && m >= 1, "gen_sd2 needs n >= 1 and m >= 1");
    let jobs = (0..n)
        .map(|_| Job {
            operations: (0..m).map(|_| random_operation(m, 99, rng)).collect(),
        })
        .collect();
    FjspInstance::new(m, jobs)
}

/// Job lengths vary in `[max(1, m-2), m+2]`; `|M_ij| ~ U[1,m]`, `p ~ U[1,20]`.
pub fn gen_sd1<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> FjspInstance {
    assert!(n >= 1 && m >= 2, "gen_sd1 needs n >= 1 and m >= 2");
    let lo = m.saturating_sub(2).max(1);
    let hi = m + 2;
    let jobs = (0..n)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            Job {
                operations: (0..len).map(|_| random_operation(m, 20, rng)).collect(),
            }
        })
        .collect();
    FjspInstance::new(m, jobs)
}

/// Native JSON container: the instance plus how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDocument {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub instance: FjspInstance,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(eligible: Vec<(usize, Time)>) -> FjspInstance {
        FjspInstance::new(
            1,
            vec![Job {
                operations: vec![OperationSpec::new(eligible)],
            }],
        )
    }

    #[test]
    fn minimal_instance_is_valid() {
        assert!(single(vec![(0, 5)]).validate().is_ok());
    }

    #[test]
    fn empty_machine_set_is_reported_with_coordinates() {
        let errs = single(vec![]).validate().unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].to_string(), "empty machine set at (1,1)");
    }

    #[test]
    fn zero_time_is_reported() {
        let errs = single(vec![(0, 0)]).validate().unwrap_err();
        assert!(matches!(errs[0].kind, ViolationKind::NonPositiveTime { .. }));
        assert!(errs[0].to_string().contains("non-positive time"));
    }

    #[test]
    fn all_violations_are_collected() {
        let mut inst = FjspInstance::new(
            2,
            vec![
                Job { operations: vec![] },
                Job {
                    operations: vec![OperationSpec::new(vec![(3, 1), (0, -2)])],
                },
            ],
        );
        inst.num_jobs = 5;
        let errs = inst.validate().unwrap_err();
        assert_eq!(errs.len(), 4, "{errs:?}");
    }

    #[test]
    fn sd2_shape_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inst = gen_sd2(10, 5, &mut rng);
        assert_eq!(inst.num_operations(), 50);
        assert!(inst.validate().is_ok());
        for (_, _, s) in inst.operations() {
            assert!((1..=5).contains(&s.eligible.len()));
            assert!(s.eligible.iter().all(|&(_, p)| (1..=99).contains(&p)));
        }
    }

    #[test]
    fn sd2_degenerate() {
        for seed in 0..20 {
            let inst = gen_sd2(1, 1, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(inst.num_operations(), 1);
            let s = &inst.jobs[0].operations[0];
            assert_eq!(s.eligible.len(), 1);
            assert_eq!(s.eligible[0].0, 0);
            assert!((1..=99).contains(&s.eligible[0].1));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        for g in [Generator::Sd1, Generator::Sd2] {
            let a = g.generate(6, 4, &mut ChaCha8Rng::seed_from_u64(11));
            let b = g.generate(6, 4, &mut ChaCha8Rng::seed_from_u64(11));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sd1_job_lengths_cover_exactly_three_to_seven() {
        // histogram over 1000 draws of 10x5 instances
        let mut hist = [0usize; 16];
        for seed in 0..1000 {
            let inst = gen_sd1(10, 5, &mut ChaCha8Rng::seed_from_u64(seed));
            for job in &inst.jobs {
                hist[job.operations.len()] += 1;
            }
            for (_, _, s) in inst.operations() {
                assert!(s.eligible.iter().all(|&(_, p)| (1..=20).contains(&p)));
            }
        }
        let support: Vec<usize> = (0..16).filter(|&k| hist[k] > 0).collect();
        assert_eq!(support, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn sd1_single_job_two_machines_bounds() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..500 {
            let inst = gen_sd1(1, 2, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(inst.num_jobs, 1);
            seen.insert(inst.jobs[0].operations.len());
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn sd2_marginals_are_uniform() {
        // chi-square goodness of fit over >= 10^4 operations
        let m = 5;
        let mut size_hist = vec![0f64; m + 1];
        let mut time_hist = vec![0f64; 100];
        let mut ops = 0usize;
        let mut seed = 0;
        while ops < 20_000 {
            let inst = gen_sd2(10, m, &mut ChaCha8Rng::seed_from_u64(seed));
            seed += 1;
            for (_, _, s) in inst.operations() {
                ops += 1;
                size_hist[s.eligible.len()] += 1.0;
                for &(_, p) in &s.eligible {
                    time_hist[p as usize] += 1.0;
                }
            }
        }
        let chi2 = |obs: &[f64]| {
            let total: f64 = obs.iter().sum();
            let e = total / obs.len() as f64;
            obs.iter().map(|o| (o - e) * (o - e) / e).sum::<f64>()
        };
        assert!(size_hist[1..].iter().all(|&c| c > 0.0));
        assert!(time_hist[1..].iter().all(|&c| c > 0.0));
        assert_eq!(size_hist[0], 0.0);
        assert_eq!(time_hist[0], 0.0);
        // critical values at p = 0.001: df=4 -> 18.467, df=98 -> 147.01
        assert!(chi2(&size_hist[1..]) < 18.467);
        assert!(chi2(&time_hist[1..]) < 147.01);
    }
}
