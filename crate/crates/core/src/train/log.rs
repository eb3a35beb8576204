//! CSV loss log: `step,net,adv,cls,rec,gp,total,lr,dataset`, one row per
//! network update; `dataset` is the index of the batch's origin. Floats
//! use the shortest representation that parses back to the same value, so
//! logs from identical runs compare byte for byte.

use std::io::{self, Write};

use super::StepOutcome;
use crate::loss::LossBreakdown;

pub const LOG_HEADER: &str = "step,net,adv,cls,rec,gp,total,lr,dataset";

pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    /// Starts a fresh log, writing the header.
    pub fn create(mut out: W) -> io::Result<Self> {
        writeln!(out, "{LOG_HEADER}")?;
        Ok(Self { out })
    }

    /// Continues an existing log without a header.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, o: &StepOutcome) -> io::Result<()> {
        self.row(o, "D", &o.d)?;
        if let Some(g) = &o.g {
            self.row(o, "G", g)?;
        }
        Ok(())
    }

    fn row(&mut self, o: &StepOutcome, net: &str, b: &LossBreakdown) -> io::Result<()> {
        writeln!(
            self.out,
            "{},{net},{},{},{},{},{},{},{}",
            o.step, b.adv, b.cls, b.rec, b.gp, b.total, o.lr, o.dataset
        )
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Step number of a data row.
pub fn step_of(row: &str) -> Option<u64> {
    row.split(',').next()?.parse().ok()
}

/// Lines of `log` after the header whose step exceeds `after`.
pub fn rows_after(log: &str, after: u64) -> Vec<&str> {
    log.lines().skip(1).filter(|l| step_of(l).is_some_and(|s| s > after)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let b = LossBreakdown { adv: 0.1, cls: 1.0 / 3.0, rec: 0.0, gp: 2.5e-7, total: -1.25 };
        let mut log = LossLog::create(Vec::new()).unwrap();
        log.record(&StepOutcome { step: 5, dataset: 1, lr: 1e-4, d: b.clone(), g: Some(b.clone()) }).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 3);
        let cls: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(cls, 1.0 / 3.0);
        assert!(lines[2].starts_with("5,G,") && lines[2].ends_with(",1"));
        assert_eq!(rows_after(&text, 4).len(), 2);
        assert!(rows_after(&text, 5).is_empty());
    }
}
