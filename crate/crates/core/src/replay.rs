//! Replay buffer with a pinned demonstration partition.
//!
//! Demonstrations are loaded once and never evicted. Agent transitions go into
//! a bounded FIFO ring. Batches are always half demonstrations, half agent
//! transitions, each half drawn uniformly with replacement.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::envs::{Observation, Rollout, Termination, Transition};
use crate::error::{Error, Result};

pub const DEFAULT_SAMP_CAPACITY: usize = 50_000;

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    demo: Vec<Transition>,
    samp: VecDeque<Transition>,
    capacity: usize,
}

/// One balanced draw. `samp` is empty while the agent partition is empty.
#[derive(Debug)]
pub struct BalancedBatch<'a> {
    pub demo: Vec<&'a Transition>,
    pub samp: Vec<&'a Transition>,
}

impl ReplayBuffer {
    /// Flatten `demos` into the demonstration partition, preserving order.
    pub fn init_with_demos(demos: &[Rollout], capacity: usize) -> Result<Self> {
        let demo: Vec<Transition> = demos
            .iter()
            .flat_map(|r| r.transitions.iter().cloned())
            .collect();
        if demo.is_empty() {
            return Err(Error::Config("no demonstration transitions".into()));
        }
        if capacity == 0 {
            return Err(Error::Config("agent buffer capacity must be positive".into()));
        }
        Ok(Self {
            demo,
            samp: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        })
    }

    pub fn demo(&self) -> &[Transition] {
        &self.demo
    }

    pub fn samp(&self) -> &VecDeque<Transition> {
        &self.samp
    }

    pub fn demo_len(&self) -> usize {
        self.demo.len()
    }

    pub fn samp_len(&self) -> usize {
        self.samp.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Add an agent transition, evicting the oldest one when full.
    pub fn append(&mut self, t: Transition) {
        if self.samp.len() == self.capacity {
            self.samp.pop_front();
        }
        self.samp.push_back(t);
    }

    pub fn sample_balanced<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<BalancedBatch<'_>> {
        if batch_size < 2 || !batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch size must be even and at least 2, got {batch_size}"
            )));
        }
        let half = batch_size / 2;
        let demo = (0..half)
            .map(|_| &self.demo[rng.gen_range(0..self.demo.len())])
            .collect();
        let samp = if self.samp.is_empty() {
            Vec::new()
        } else {
            (0..half)
                .map(|_| &self.samp[rng.gen_range(0..self.samp.len())])
                .collect()
        };
        Ok(BalancedBatch { demo, samp })
    }
}

/// First line of a demonstration file.
pub const DEMO_FILE_HEADER: &str = "# sqil-demos v1";

/// Write rollouts as tab-separated lines, one transition per line:
///
/// `episode  state  action  next_state  absorbing  end  obs  next_obs`
///
/// `absorbing` is `0`/`1`; `end` is `-` except on an episode's last line,
/// where it is `goal`, `hazard` or `step_limit`; observation vectors are
/// comma-separated. Lines starting with `#` are comments.
pub fn write_demos<W: Write>(rollouts: &[Rollout], mut out: W) -> Result<()> {
    writeln!(out, "{DEMO_FILE_HEADER}")?;
    writeln!(
        out,
        "# episode\tstate\taction\tnext_state\tabsorbing\tend\tobs\tnext_obs"
    )?;
    for (episode, rollout) in rollouts.iter().enumerate() {
        let last = rollout.transitions.len().saturating_sub(1);
        for (i, t) in rollout.transitions.iter().enumerate() {
            let end = if i == last {
                rollout.terminated_by.to_string()
            } else {
                "-".to_string()
            };
            writeln!(
                out,
                "{episode}\t{}\t{}\t{}\t{}\t{end}\t{}\t{}",
                t.state_id,
                t.action,
                t.next_state_id,
                u8::from(t.absorbing),
                join(&t.obs.features),
                join(&t.next_obs.features),
            )?;
        }
    }
    Ok(())
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, name: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::parse("demonstration file", format!("line {line}: bad {name} {field:?}")))
}

fn parse_obs(field: &str, line: usize) -> Result<Observation> {
    let features = field
        .split(',')
        .map(|v| parse_field::<f64>(v, line, "observation value"))
        .collect::<Result<Vec<_>>>()?;
    Ok(Observation::new(features))
}

/// Read rollouts written by [`write_demos`].
pub fn read_demos<R: BufRead>(input: R) -> Result<Vec<Rollout>> {
    let bad = |line: usize, msg: String| Error::parse("demonstration file", format!("line {line}: {msg}"));
    let mut lines = input.lines().enumerate();
    match lines.next() {
        Some((_, Ok(first))) if first.trim() == DEMO_FILE_HEADER => {}
        Some((_, Ok(first))) => return Err(bad(1, format!("expected {DEMO_FILE_HEADER:?}, found {first:?}"))),
        Some((_, Err(e))) => return Err(e.into()),
        None => return Err(bad(1, "empty file".into())),
    }

    let mut rollouts = Vec::new();
    let mut current: Vec<Transition> = Vec::new();
    let mut current_episode: Option<usize> = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(bad(line_no, format!("expected 8 fields, found {}", fields.len())));
        }
        let episode: usize = parse_field(fields[0], line_no, "episode")?;
        if current_episode.is_some_and(|e| e != episode) || (current_episode.is_none() && !current.is_empty()) {
            return Err(bad(line_no, "episode changed before its final transition".into()));
        }
        current_episode = Some(episode);
        let absorbing = match fields[4] {
            "0" => false,
            "1" => true,
            other => return Err(bad(line_no, format!("bad absorbing flag {other:?}"))),
        };
        let t = Transition {
            state_id: parse_field(fields[1], line_no, "state")?,
            action: parse_field(fields[2], line_no, "action")?,
            next_state_id: parse_field(fields[3], line_no, "next state")?,
            absorbing,
            obs: parse_obs(fields[6], line_no)?,
            next_obs: parse_obs(fields[7], line_no)?,
        };
        if let Some(prev) = current.last() {
            if prev.next_state_id != t.state_id {
                return Err(bad(line_no, "transition does not continue the previous one".into()));
            }
        }
        current.push(t);
        let terminated_by = match fields[5] {
            "-" => None,
            "goal" => Some(Termination::Goal),
            "hazard" => Some(Termination::Hazard),
            "step_limit" => Some(Termination::StepLimit),
            other => return Err(bad(line_no, format!("bad end marker {other:?}"))),
        };
        match (terminated_by, absorbing) {
            (Some(terminated_by), true) => {
                rollouts.push(Rollout {
                    transitions: std::mem::take(&mut current),
                    terminated_by,
                });
                current_episode = None;
            }
            (None, false) => {}
            _ => return Err(bad(line_no, "end marker and absorbing flag disagree".into())),
        }
    }
    if !current.is_empty() {
        return Err(bad(0, "file ends inside an episode".into()));
    }
    Ok(rollouts)
}
