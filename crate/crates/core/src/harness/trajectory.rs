//! Trajectory files: CSV with header `s0,..,a0,..,r,c,ns0,..,done`.
//!
//! Floats are written with 17 significant digits so files round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::RngCore;

use crate::agent::Transition;
use crate::env::Environment;
use crate::error::{Error, Result};

pub fn header(state_dim: usize, action_dim: usize) -> String {
    let mut cols: Vec<String> = (0..state_dim).map(|i| format!("s{i}")).collect();
    cols.extend((0..action_dim).map(|i| format!("a{i}")));
    cols.push("r".into());
    cols.push("c".into());
    cols.extend((0..state_dim).map(|i| format!("ns{i}")));
    cols.push("done".into());
    cols.join(",")
}

fn push_float(line: &mut String, v: f64) {
    let _ = write!(line, "{v:.16e},");
}

pub fn format_transition(t: &Transition) -> String {
    let mut line = String::new();
    for &v in t.s.iter().chain(&t.a) {
        push_float(&mut line, v);
    }
    push_float(&mut line, t.r);
    push_float(&mut line, t.c);
    for &v in &t.s_next {
        push_float(&mut line, v);
    }
    line.push(if t.done { '1' } else { '0' });
    line
}

pub fn write_trajectory(path: &Path, transitions: &[Transition]) -> Result<()> {
    let Some(first) = transitions.first() else {
        return Err(Error::Config("refusing to write an empty trajectory".into()));
    };
    let mut out = header(first.s.len(), first.a.len());
    out.push('\n');
    for t in transitions {
        out.push_str(&format_transition(t));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a trajectory file. Dimensions come from the header.
pub fn read_trajectory(path: &Path) -> Result<Vec<Transition>> {
    parse_trajectory(&fs::read_to_string(path)?)
}

pub fn parse_trajectory(text: &str) -> Result<Vec<Transition>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let cols: Vec<&str> = head.split(',').map(str::trim).collect();
    let count = |prefix: &str| {
        cols.iter()
            .filter(|c| {
                c.strip_prefix(prefix)
                    .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            })
            .count()
    };
    let (sd, ad) = (count("s"), count("a"));
    if sd == 0 || ad == 0 || head.trim() != header(sd, ad) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {head:?}"),
        });
    }
    let width = 2 * sd + ad + 3;
    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = fields[i].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad number {:?}", fields[i]),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    line: lineno,
                    msg: "non-finite value".into(),
                })
            }
        };
        let done = match fields[width - 1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("done must be 0 or 1, got {other:?}"),
                });
            }
        };
        out.push(Transition {
            s: (0..sd).map(num).collect::<Result<_>>()?,
            a: (sd..sd + ad).map(num).collect::<Result<_>>()?,
            r: num(sd + ad)?,
            c: num(sd + ad + 1)?,
            s_next: (sd + ad + 2..2 * sd + ad + 2).map(num).collect::<Result<_>>()?,
            done,
        });
    }
    Ok(out)
}

/// Initial data: every transition goes to the replay buffer, transitions
/// with `c ≥ -cost_threshold` also seed the GP with `((s, a), -c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitData {
    pub transitions: Vec<Transition>,
    pub gp_inputs: Vec<Vec<f64>>,
    pub gp_targets: Vec<f64>,
}

pub fn split_init_data(transitions: Vec<Transition>, cost_threshold: f64) -> InitData {
    let mut gp_inputs = Vec::new();
    let mut gp_targets = Vec::new();
    for t in transitions.iter().filter(|t| t.c >= -cost_threshold) {
        gp_inputs.push(t.state_action());
        gp_targets.push(-t.c);
    }
    InitData {
        transitions,
        gp_inputs,
        gp_targets,
    }
}

pub fn load_init_trajectory(path: &Path, cost_threshold: f64) -> Result<InitData> {
    Ok(split_init_data(read_trajectory(path)?, cost_threshold))
}

/// Rolls `policy` out for `steps` steps, resetting every episode.
pub fn rollout<E, F>(env: &mut E, steps: usize, mut policy: F, rng: &mut dyn RngCore) -> Result<Vec<Transition>>
where
    E: Environment + ?Sized,
    F: FnMut(&[f64], &mut dyn RngCore) -> Result<Vec<f64>>,
{
    let ep_len = env.episode_length();
    let mut out = Vec::with_capacity(steps);
    let mut s = env.reset(rng);
    let mut t = 0;
    for _ in 0..steps {
        let a = policy(&s, rng)?;
        let step = env.step(&a)?;
        t += 1;
        let done = t == ep_len;
        out.push(Transition {
            s: std::mem::take(&mut s),
            a,
            r: step.reward,
            c: step.cost,
            s_next: step.next_state.clone(),
            done,
        });
        if done {
            t = 0;
            s = env.reset(rng);
        } else {
            s = step.next_state;
        }
    }
    Ok(out)
}
