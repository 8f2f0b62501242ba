//! Reader and writer for the whitespace-separated `.fjs` benchmark format
//! (Brandimarte / Hurink distribution).
//!
//! ```text
//! <num_jobs> <num_machines> <avg_flexibility>
//! <n_i> [<k_ij> (<machine> <time>) x k_ij] x n_i      one line per job
//! ```
//!
//! Machine indices are 1-based in the file and 0-based in memory.

use std::fmt::Write as _;

use thiserror::Error;

use crate::instance::{FjspInstance, Job, OperationSpec, Time};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FjsError {
    #[error("line {line}, column {column}: malformed token `{token}`: {reason}")]
    Malformed {
        line: usize,
        column: usize,
        token: String,
        reason: &'static str,
    },
    #[error("line {line}: unexpected end of line, {expected}")]
    Truncated { line: usize, expected: &'static str },
    #[error("line {line}, column {column}: trailing token `{token}` after the last operation")]
    Trailing {
        line: usize,
        column: usize,
        token: String,
    },
    #[error("header declares {declared} jobs but the body has {found} job lines")]
    JobCount { declared: usize, found: usize },
    #[error("line {line}, column {column}: machine index {machine} outside 1..={max}")]
    MachineRange {
        line: usize,
        column: usize,
        machine: i64,
        max: usize,
    },
    #[error("line {line}, column {column}: machine {machine} listed twice for one operation")]
    DuplicateMachine {
        line: usize,
        column: usize,
        machine: i64,
    },
    #[error("empty input: missing header line")]
    MissingHeader,
}

struct Token<'a> {
    text: &'a str,
    line: usize,
    column: usize,
}

fn tokens(line_no: usize, line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: &line[s..i],
                    line: line_no,
                    column: s + 1,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            line: line_no,
            column: s + 1,
        });
    }
    out
}

fn next_token<'t, 'a>(
    it: &mut std::slice::Iter<'t, Token<'a>>,
    line: usize,
    expected: &'static str,
) -> Result<&'t Token<'a>, FjsError> {
    it.next().ok_or(FjsError::Truncated { line, expected })
}

fn int(tok: &Token<'_>) -> Result<i64, FjsError> {
    tok.text.parse::<i64>().map_err(|_| FjsError::Malformed {
        line: tok.line,
        column: tok.column,
        token: tok.text.to_string(),
        reason: "expected an integer",
    })
}

fn count(tok: &Token<'_>, reason: &'static str) -> Result<usize, FjsError> {
    let v = int(tok)?;
    if v < 1 {
        return Err(FjsError::Malformed {
            line: tok.line,
            column: tok.column,
            token: tok.text.to_string(),
            reason,
        });
    }
    Ok(v as usize)
}

/// Parses `.fjs` text into an instance.
pub fn parse_fjs(text: &str) -> Result<FjspInstance, FjsError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, header) = lines.next().ok_or(FjsError::MissingHeader)?;
    let htoks = tokens(hline, header);
    if htoks.len() < 2 {
        return Err(FjsError::Truncated {
            line: hline,
            expected: "header needs job and machine counts",
        });
    }
    let num_jobs = count(&htoks[0], "job count must be positive")?;
    let num_machines = count(&htoks[1], "machine count must be positive")?;
    if let Some(flex) = htoks.get(2) {
        flex.text.parse::<f64>().map_err(|_| FjsError::Malformed {
            line: flex.line,
            column: flex.column,
            token: flex.text.to_string(),
            reason: "expected a decimal average flexibility",
        })?;
    }
    if let Some(extra) = htoks.get(3) {
        return Err(FjsError::Trailing {
            line: extra.line,
            column: extra.column,
            token: extra.text.to_string(),
        });
    }

    let mut jobs = Vec::with_capacity(num_jobs);
    for (line_no, line) in lines {
        let toks = tokens(line_no, line);
        let mut it = toks.iter();
        let n_ops = count(next_token(&mut it, line_no, "expected operation count")?, "operation count must be positive")?;
        let mut operations = Vec::with_capacity(n_ops);
        for _ in 0..n_ops {
            let k = count(next_token(&mut it, line_no, "expected machine count of an operation")?, "machine count must be positive")?;
            let mut eligible: Vec<(usize, Time)> = Vec::with_capacity(k);
            for _ in 0..k {
                let mtok = next_token(&mut it, line_no, "expected machine index")?;
                let machine = int(mtok)?;
                if machine < 1 || machine as usize > num_machines {
                    return Err(FjsError::MachineRange {
                        line: mtok.line,
                        column: mtok.column,
                        machine,
                        max: num_machines,
                    });
                }
                let m0 = machine as usize - 1;
                if eligible.iter().any(|&(m, _)| m == m0) {
                    return Err(FjsError::DuplicateMachine {
                        line: mtok.line,
                        column: mtok.column,
                        machine,
                    });
                }
                let ttok = next_token(&mut it, line_no, "expected processing time")?;
                let time = int(ttok)?;
                if time < 1 {
                    return Err(FjsError::Malformed {
                        line: ttok.line,
                        column: ttok.column,
                        token: ttok.text.to_string(),
                        reason: "processing time must be positive",
                    });
                }
                eligible.push((m0, time));
            }
            operations.push(OperationSpec::new(eligible));
        }
        if let Some(extra) = it.next() {
            return Err(FjsError::Trailing {
                line: extra.line,
                column: extra.column,
                token: extra.text.to_string(),
            });
        }
        jobs.push(Job { operations });
    }
    if jobs.len() != num_jobs {
        return Err(FjsError::JobCount {
            declared: num_jobs,
            found: jobs.len(),
        });
    }
    Ok(FjspInstance {
        num_jobs,
        num_machines,
        jobs,
    })
}

/// Serializes an instance in `.fjs` form. The header's third field is the
/// average eligible-set size with one decimal.
pub fn write_fjs(inst: &FjspInstance) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {:.1}",
        inst.num_jobs,
        inst.num_machines,
        inst.average_flexibility()
    );
    for job in &inst.jobs {
        let _ = write!(out, "{}", job.operations.len());
        for op in &job.operations {
            let _ = write!(out, " {}", op.eligible.len());
            for &(m, p) in &op.eligible {
                let _ = write!(out, " {} {}", m + 1, p);
            }
        }
        out.push('\n');
    }
    out
}
