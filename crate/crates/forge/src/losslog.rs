//! Per-step loss log as CSV, one row per step and direction.

use std::path::Path;

use zigan_core::losses::DirectionLosses;
use zigan_core::training::StepReport;

use crate::error::{ForgeError, Result};
use crate::imageio::write_atomic;

pub const COLUMNS: [&str; 10] = ["step", "direction", "adv", "cam", "cycle", "identity", "l1", "constancy", "style", "total"];

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    /// `s2t` or `t2s`.
    pub direction: String,
    /// adv, cam, cycle, identity, l1, constancy, style, direction total.
    pub values: [f64; 8],
}

impl LossRow {
    pub fn total(&self) -> f64 {
        self.values[7]
    }
}

fn row(step: u64, direction: &str, l: &DirectionLosses, total: f64) -> LossRow {
    LossRow { step, direction: direction.into(), values: [l.adv, l.cam, l.cycle, l.identity, l.l1, l.constancy, l.style, total] }
}

pub fn rows_for(r: &StepReport) -> [LossRow; 2] {
    [row(r.step, "s2t", &r.losses.s2t, r.losses.s2t_total), row(r.step, "t2s", &r.losses.t2s, r.losses.t2s_total)]
}

/// Sum of both direction totals per step, in step order.
pub fn step_totals(rows: &[LossRow]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((s, t)) if *s == r.step => *t += r.total(),
            _ => out.push((r.step, r.total())),
        }
    }
    out
}

pub fn to_csv(rows: &[LossRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| ForgeError::Data(format!("loss log: {e}"));
    w.write_record(COLUMNS).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.direction.clone()];
        rec.extend(r.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner().map_err(|e| ForgeError::Data(format!("loss log: {e}")))
}

pub fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    write_atomic(path, &to_csv(rows)?)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let bad = |m: String| ForgeError::Data(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(COLUMNS) {
        return Err(bad("unexpected header".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let step = rec[0].parse().map_err(|_| bad(format!("bad step {:?}", &rec[0])))?;
        let mut values = [0.0; 8];
        for (i, v) in values.iter_mut().enumerate() {
            *v = rec[i + 2].parse().map_err(|_| bad(format!("bad value {:?}", &rec[i + 2])))?;
        }
        out.push(LossRow { step, direction: rec[1].to_string(), values });
    }
    Ok(out)
}
