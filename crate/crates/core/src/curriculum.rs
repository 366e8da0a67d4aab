//! Staged data mixture for curriculum training.
//!
//! A schedule has one row per difficulty `m×k` (reconstruct or condition on
//! `m` chunks of `k` tokens) and nine per-stage example counts. Early stages
//! are dominated by one- and two-chunk examples; later stages by long ones.
//!
//! Text format, one row per line, `#` starts a comment:
//!
//! ```text
//! # label  stage1 .. stage9  total
//! 1x8      1333 445 148 49 16 6 2 1 0  2000
//! ```
//!
//! The label may use `x` or `×`.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STAGES: usize = 9;

/// `(chunks, k, per-stage counts, declared total)` as printed in the reference table.
const BUILTIN: [(usize, usize, [u64; STAGES], u64); 9] = [
    (1, 8, [1333, 445, 148, 49, 16, 6, 2, 1, 0], 2000),
    (2, 8, [333, 298, 267, 238, 213, 191, 171, 153, 137], 2000),
    (4, 8, [83, 102, 126, 156, 193, 238, 293, 362, 447], 2000),
    (8, 8, [20, 35, 61, 106, 185, 324, 565, 985, 1719], 4000),
    (16, 8, [5, 11, 23, 48, 103, 220, 468, 997, 2125], 4000),
    (32, 8, [1, 3, 7, 19, 50, 133, 353, 939, 2496], 4000),
    (64, 8, [1, 3, 9, 25, 73, 212, 618, 1802, 5259], 8000),
    (128, 8, [1, 3, 9, 25, 73, 212, 618, 1802, 5259], 8000),
    (256, 8, [1, 3, 9, 25, 73, 212, 618, 1802, 5259], 8000),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleRow {
    /// Number of chunks per example.
    pub chunks: usize,
    /// Chunk size the row was written for.
    pub k: usize,
    pub counts: [u64; STAGES],
    pub total: u64,
}

impl ScheduleRow {
    pub fn label(&self) -> String {
        format!("{}×{}", self.chunks, self.k)
    }

    pub fn count_sum(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-stage counts are rounded terms of a geometric sequence, so their sum
    /// may miss the declared total by at most half an example per stage.
    fn check(&self) -> Result<()> {
        if self.chunks == 0 || self.k == 0 {
            return Err(Error::Schedule(format!("row {}: chunk count and size must be positive", self.label())));
        }
        let slack = STAGES as u64 / 2;
        if self.count_sum().abs_diff(self.total) > slack {
            return Err(Error::Schedule(format!(
                "row {}: counts sum to {} but total is {}",
                self.label(),
                self.count_sum(),
                self.total
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub rows: Vec<ScheduleRow>,
}

/// One emitted example slot: which row it belongs to and how many chunks it uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Emission {
    pub row: usize,
    pub chunks: usize,
}

impl CurriculumSchedule {
    /// The reference nine-stage table, verbatim.
    pub fn builtin() -> Self {
        Self { rows: BUILTIN.iter().map(|&(chunks, k, counts, total)| ScheduleRow { chunks, k, counts, total }).collect() }
    }

    pub fn new(rows: Vec<ScheduleRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Schedule("no rows".into()));
        }
        for r in &rows {
            r.check()?;
        }
        Ok(Self { rows })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Schedule(format!("line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != STAGES + 2 {
                return Err(bad(&format!("expected {} fields, found {}", STAGES + 2, fields.len())));
            }
            let label = fields[0].replace(['×', 'X'], "x");
            let (m, k) = label.split_once('x').ok_or_else(|| bad("label must look like 4x8"))?;
            let chunks = m.parse().map_err(|_| bad("bad chunk count in label"))?;
            let k = k.parse().map_err(|_| bad("bad chunk size in label"))?;
            let mut counts = [0u64; STAGES];
            for (c, f) in counts.iter_mut().zip(&fields[1..=STAGES]) {
                *c = f.parse().map_err(|_| bad(&format!("count {f:?} is not a non-negative integer")))?;
            }
            let total = fields[STAGES + 1].parse().map_err(|_| bad("bad total"))?;
            rows.push(ScheduleRow { chunks, k, counts, total });
        }
        Self::new(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every count multiplied by `factor` and rounded; totals re-declared as the new sums.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::Schedule(format!("scale factor {factor} must be finite and non-negative")));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let counts = r.counts.map(|c| (c as f64 * factor).round() as u64);
                ScheduleRow { counts, total: counts.iter().sum(), ..r.clone() }
            })
            .collect();
        Ok(Self { rows })
    }

    /// Drops rows needing more than `max_chunks` chunks.
    pub fn truncated(&self, max_chunks: usize) -> Result<Self> {
        let rows: Vec<ScheduleRow> = self.rows.iter().filter(|r| r.chunks <= max_chunks).cloned().collect();
        if rows.is_empty() {
            return Err(Error::Schedule(format!("no row fits within {max_chunks} chunks")));
        }
        Ok(Self { rows })
    }

    pub fn row(&self, label: &str) -> Option<&ScheduleRow> {
        let want = label.replace('x', "×");
        self.rows.iter().find(|r| r.label() == want)
    }

    pub fn stage_total(&self, stage: usize) -> Result<u64> {
        check_stage(stage)?;
        Ok(self.rows.iter().map(|r| r.counts[stage - 1]).sum())
    }

    /// Mean chunks per example in a stage.
    pub fn mean_chunks(&self, stage: usize) -> Result<f64> {
        let total = self.stage_total(stage)?;
        let weighted: u64 = self.rows.iter().map(|r| r.counts[stage - 1] * r.chunks as u64).sum();
        Ok(if total == 0 { 0.0 } else { weighted as f64 / total as f64 })
    }
}

impl fmt::Display for CurriculumSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# label stage1..stage{STAGES} total")?;
        for r in &self.rows {
            write!(f, "{}x{}", r.chunks, r.k)?;
            for c in r.counts {
                write!(f, " {c}")?;
            }
            writeln!(f, " {}", r.total)?;
        }
        Ok(())
    }
}

fn check_stage(stage: usize) -> Result<()> {
    if !(1..=STAGES).contains(&stage) {
        return Err(Error::Schedule(format!("stage {stage} outside 1..={STAGES}")));
    }
    Ok(())
}

/// Exactly the stage's per-row counts, shuffled.
pub fn sample_stage<R: Rng + ?Sized>(schedule: &CurriculumSchedule, stage: usize, rng: &mut R) -> Result<Vec<Emission>> {
    check_stage(stage)?;
    let mut out = Vec::with_capacity(schedule.stage_total(stage)? as usize);
    for (row, r) in schedule.rows.iter().enumerate() {
        out.extend(std::iter::repeat_n(Emission { row, chunks: r.chunks }, r.counts[stage - 1] as usize));
    }
    out.shuffle(rng);
    Ok(out)
}
