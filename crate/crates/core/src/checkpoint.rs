//! Plain-text checkpoints of soft Q functions.
//!
//! ```text
//! sqil-checkpoint v1
//! kind tabular            (or: kind mlp)
//! sizes 25 5              (states actions, or the network layer sizes)
//! params 125
//! <one parameter per line>
//! ```
//!
//! Parameters are written with Rust's shortest round-trip float formatting,
//! so reading a checkpoint back reproduces the exact bits.

use std::io::{BufRead, Write};

use crate::approx::Network;
use crate::error::{Error, Result};
use crate::softq::{SoftQFunction, TabularQ};

pub const CHECKPOINT_HEADER: &str = "sqil-checkpoint v1";

pub fn write_checkpoint<W: Write>(q: &SoftQFunction, mut out: W) -> Result<()> {
    let (kind, sizes) = match q {
        SoftQFunction::Tabular(t) => ("tabular", vec![t.state_count(), t.action_count()]),
        SoftQFunction::Approx(n) => ("mlp", n.sizes().to_vec()),
    };
    let sizes: Vec<String> = sizes.iter().map(usize::to_string).collect();
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    writeln!(out, "kind {kind}")?;
    writeln!(out, "sizes {}", sizes.join(" "))?;
    writeln!(out, "params {}", q.param_count())?;
    for p in q.params() {
        writeln!(out, "{p:?}")?;
    }
    Ok(())
}

fn field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::parse("checkpoint", format!("expected a `{key}` line")))
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<SoftQFunction> {
    let lines = input.lines().collect::<std::io::Result<Vec<_>>>()?;
    let mut it = lines.iter().map(|l| l.trim_end());
    match it.next() {
        Some(CHECKPOINT_HEADER) => {}
        Some(other) => {
            return Err(Error::parse(
                "checkpoint",
                format!("unsupported header {other:?} (expected {CHECKPOINT_HEADER:?})"),
            ))
        }
        None => return Err(Error::parse("checkpoint", "empty input")),
    }
    let kind = field(it.next(), "kind")?.to_string();
    let sizes = field(it.next(), "sizes")?
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|e| Error::parse("checkpoint sizes", e)))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = field(it.next(), "params")?
        .parse()
        .map_err(|e| Error::parse("checkpoint params", e))?;
    let params = it
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<f64>().map_err(|e| Error::parse("checkpoint parameter", e)))
        .collect::<Result<Vec<_>>>()?;
    if params.len() != count {
        return Err(Error::Shape {
            what: "checkpoint parameters",
            expected: count,
            got: params.len(),
        });
    }
    match kind.as_str() {
        "tabular" => match sizes[..] {
            [states, actions] => Ok(SoftQFunction::Tabular(TabularQ::from_flat(states, actions, params)?)),
            _ => Err(Error::parse("checkpoint", "tabular sizes must be `states actions`")),
        },
        "mlp" => Ok(SoftQFunction::Approx(Network::from_flat(&sizes, params)?)),
        other => Err(Error::parse("checkpoint", format!("unknown kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn round_trip(q: &SoftQFunction) -> SoftQFunction {
        let mut buf = Vec::new();
        write_checkpoint(q, &mut buf).unwrap();
        read_checkpoint(&buf[..]).unwrap()
    }

    #[test]
    fn tabular_round_trip_is_exact() {
        let q = SoftQFunction::Tabular(
            TabularQ::from_rows(vec![vec![0.1, -1e-300, 3.5], vec![f64::MAX, 0.0, -2.0 / 3.0]]).unwrap(),
        );
        assert_eq!(round_trip(&q), q);
    }

    #[test]
    fn network_round_trip_is_exact() {
        let q = SoftQFunction::Approx(Network::new(&[4, 7, 3], &mut seeded(9)).unwrap());
        assert_eq!(round_trip(&q), q);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_checkpoint(&b""[..]).is_err());
        assert!(read_checkpoint(&b"sqil-checkpoint v0\n"[..]).is_err());
        let short = b"sqil-checkpoint v1\nkind tabular\nsizes 1 2\nparams 2\n0.5\n";
        assert!(matches!(read_checkpoint(&short[..]), Err(Error::Shape { .. })));
        let kind = b"sqil-checkpoint v1\nkind forest\nsizes 1 1\nparams 1\n0.5\n";
        assert!(read_checkpoint(&kind[..]).is_err());
    }
}
