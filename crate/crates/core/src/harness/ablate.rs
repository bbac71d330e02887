//! Loss-term ablation: one student per distillation mode, equal budget
//! and seed, scored on held-out chunks.

use std::fmt;

use super::config::{RunConfig, TrainMode};
use super::train::cmd_train;
use crate::baselines::DistillMode;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: DistillMode,
    /// Mean closed-form KL(student ‖ teacher) per time step on test chunks.
    pub test_kl: f64,
    pub test_frame: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, mode: DistillMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>12} {:>12} {:>7}",
            "mode", "test_kl", "test_frame", "steps"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>12.6} {:>12.6} {:>7}",
                r.mode, r.test_kl, r.test_frame, r.steps
            )?;
        }
        Ok(())
    }
}

/// Trains one student per entry of `modes` from `base` (which must name a
/// teacher checkpoint). Only the loss mode differs between runs; each
/// student's checkpoint and log paths get the mode as a suffix.
pub fn cmd_ablate(base: &RunConfig, modes: &[DistillMode]) -> Result<AblationTable> {
    if modes.is_empty() {
        return Err(Error::config("loss", "no modes to compare"));
    }
    let mut table = AblationTable::default();
    for &mode in modes {
        let mut cfg = base.clone();
        cfg.mode = TrainMode::Distill;
        cfg.distill.mode = mode;
        cfg.resume = None;
        let suffix = |p: &std::path::PathBuf| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            let ext = p
                .extension()
                .and_then(|s| s.to_str())
                .map(|e| format!(".{e}"))
                .unwrap_or_default();
            p.with_file_name(format!("{stem}.{mode}{ext}"))
        };
        cfg.checkpoint = base.checkpoint.as_ref().map(suffix);
        cfg.log = base.log.as_ref().map(suffix);
        log::info!(
            "ablation: training the {mode} student for {} steps",
            cfg.steps
        );
        let out = cmd_train(&cfg)?;
        let row = AblationRow {
            mode,
            test_kl: out.last.get("test_kl").unwrap_or(f64::NAN),
            test_frame: out.last.get("test_frame").unwrap_or(f64::NAN),
            steps: out.steps,
        };
        log::info!(
            "ablation: {mode} test KL {:.6}, frame {:.6}",
            row.test_kl,
            row.test_frame
        );
        table.rows.push(row);
    }
    Ok(table)
}
