//! Checkpoint files: a version comment, a `round,epoch,theta_0,...` header,
//! then one row per stored model.

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::fed::Checkpoint;

pub const CHECKPOINT_VERSION: &str = "# hmine-checkpoint v1";

pub fn write_checkpoints<W: Write>(mut out: W, checkpoints: &[Checkpoint]) -> Result<()> {
    writeln!(out, "{CHECKPOINT_VERSION}")?;
    let p = checkpoints.first().map_or(0, |c| c.theta.len());
    let mut header = String::from("round,epoch");
    for i in 0..p {
        header.push_str(&format!(",theta_{i}"));
    }
    writeln!(out, "{header}")?;
    for ck in checkpoints {
        if ck.theta.len() != p {
            return Err(Error::Contract("checkpoints differ in parameter count".into()));
        }
        let mut line = format!("{},{}", ck.round, ck.epoch);
        for v in &ck.theta {
            // `{:?}` round-trips f64 exactly
            line.push_str(&format!(",{v:?}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_checkpoints<R: Read>(input: R) -> Result<Vec<Checkpoint>> {
    let mut lines = BufReader::new(input).lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
    match lines.next() {
        Some((_, Ok(l))) if l.trim() == CHECKPOINT_VERSION => {}
        Some((i, Ok(l))) => return Err(parse_err(i, format!("unsupported checkpoint version line {l:?}"))),
        Some((_, Err(e))) => return Err(e.into()),
        None => return Err(parse_err(0, "empty checkpoint file".into())),
    }
    let (hi, header) = match lines.next() {
        Some((i, l)) => (i, l?),
        None => return Err(parse_err(1, "missing header".into())),
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "round" || cols[1] != "epoch" {
        return Err(parse_err(hi, "header must start with round,epoch".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(i, format!("expected {} fields, got {}", cols.len(), fields.len())));
        }
        let int = |s: &str| s.trim().parse::<usize>().map_err(|e| parse_err(i, e.to_string()));
        let theta = fields[2..]
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| parse_err(i, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        out.push(Checkpoint {
            round: int(fields[0])?,
            epoch: int(fields[1])?,
            theta,
        });
    }
    Ok(out)
}
