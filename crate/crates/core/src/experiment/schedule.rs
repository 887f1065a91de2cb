use std::fmt;
use std::str::FromStr;

use super::ExperimentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Step decay by 10x every 10 epochs.
    Cnn,
    /// Three-epoch linear warm-up, then halving every 10 epochs.
    Transformer,
}

impl ScheduleKind {
    pub fn default_epochs(self) -> usize {
        match self {
            ScheduleKind::Cnn => 30,
            ScheduleKind::Transformer => 50,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            ScheduleKind::Cnn => 1e-4,
            ScheduleKind::Transformer => 5e-4,
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cnn => "cnn",
            ScheduleKind::Transformer => "transformer",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cnn" => Ok(ScheduleKind::Cnn),
            "transformer" => Ok(ScheduleKind::Transformer),
            other => Err(format!("unknown schedule `{other}` (cnn|transformer)")),
        }
    }
}

const WARMUP_EPOCHS: usize = 3;

/// Learning rate for `epoch` (0-based) of a run lasting `total_epochs`.
pub fn lr_schedule(kind: ScheduleKind, epoch: usize, base_lr: f64, total_epochs: usize) -> Result<f64, ExperimentError> {
    if epoch >= total_epochs {
        return Err(ExperimentError::Schedule(format!(
            "epoch {epoch} is beyond the configured {total_epochs} epochs"
        )));
    }
    let decays = (epoch / 10) as i32;
    Ok(match kind {
        ScheduleKind::Cnn => base_lr / 10f64.powi(decays),
        ScheduleKind::Transformer if epoch < WARMUP_EPOCHS => (epoch + 1) as f64 / WARMUP_EPOCHS as f64 * base_lr,
        ScheduleKind::Transformer => base_lr / 2f64.powi(decays),
    })
}
