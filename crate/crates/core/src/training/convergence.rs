use serde::{Deserialize, Serialize};

/// Per-epoch losses, indexed from epoch 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    /// Length of the moving average over validation losses.
    pub average_window: usize,
    /// Distance in epochs between the two averages that are compared.
    pub stall_window: usize,
}

impl Default for LossHistory {
    fn default() -> Self {
        LossHistory::new(50, 20)
    }
}

impl LossHistory {
    pub fn new(average_window: usize, stall_window: usize) -> Self {
        LossHistory {
            train: Vec::new(),
            val: Vec::new(),
            average_window: average_window.max(1),
            stall_window: stall_window.max(1),
        }
    }

    pub fn push(&mut self, train: f64, val: f64) {
        self.train.push(train);
        self.val.push(val);
    }

    pub fn epochs(&self) -> usize {
        self.val.len()
    }

    /// Epoch with the lowest validation loss (first one on ties).
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, v) in self.val.iter().enumerate() {
            if best.map_or(true, |b| *v < self.val[b]) {
                best = Some(i);
            }
        }
        best
    }

    /// Mean validation loss over the `average_window` epochs ending
    /// `back` epochs before the latest.
    pub fn moving_average(&self, back: usize) -> Option<f64> {
        let n = self.val.len().checked_sub(back)?;
        let start = n.checked_sub(self.average_window)?;
        let w = &self.val[start..n];
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }

    /// CSV with header `epoch,train_loss,val_loss`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train.iter().zip(&self.val).enumerate() {
            s.push_str(&format!("{i},{t},{v}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopReason {
    /// The moving average rose by more than 5%.
    Increased { relative_change: f64 },
    /// The moving average fell by less than 0.1%.
    Stalled { relative_change: f64 },
    /// The epoch cap was reached.
    EpochCap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Convergence {
    Continue,
    Stop(StopReason),
}

pub const MAX_INCREASE: f64 = 0.05;
pub const MIN_DECREASE: f64 = 0.001;

/// Compares the validation moving average now with the one `stall_window`
/// epochs earlier. Needs `average_window + stall_window` epochs of history
/// before it can stop.
pub fn convergence_check(h: &LossHistory) -> Convergence {
    let (Some(now), Some(before)) = (h.moving_average(0), h.moving_average(h.stall_window)) else {
        return Convergence::Continue;
    };
    let change = (now - before) / before;
    if change > MAX_INCREASE {
        Convergence::Stop(StopReason::Increased { relative_change: change })
    } else if -change < MIN_DECREASE {
        Convergence::Stop(StopReason::Stalled { relative_change: change })
    } else {
        Convergence::Continue
    }
}
