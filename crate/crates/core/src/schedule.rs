//! Plateau learning-rate schedule and seed streams shared by both training
//! stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divides the learning rate by 10 when the monitored loss has not improved
/// by `min_delta` for `patience` consecutive epochs, at most `max_decays`
/// times. Epochs are counted from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub min_delta: f64,
    pub factor: f64,
    pub max_decays: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub decays: Vec<usize>,
}

impl PlateauSchedule {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            factor: 0.1,
            max_decays: 2,
            best: None,
            bad_epochs: 0,
            decays: Vec::new(),
        }
    }

    /// Records the loss of `epoch`; returns true when the rate decays now.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => loss < b - self.min_delta,
        };
        if improved {
            self.best = Some(loss);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience && self.decays.len() < self.max_decays {
            self.decays.push(epoch);
            self.bad_epochs = 0;
            return true;
        }
        false
    }

    /// Learning rate after the decays recorded so far.
    pub fn lr(&self, base: f64) -> f64 {
        base * self.factor.powi(self.decays.len() as i32)
    }
}

/// `patience = 0` in a config means no decay at all.
pub fn patience_from_config(p: usize) -> usize {
    if p == 0 {
        usize::MAX
    } else {
        p
    }
}

/// Statelessly derives a seed for `(base, stream, index)` with SplitMix64.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED69);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub(crate) fn check_finite_loss(loss: f64, what: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss {loss} at {}", what())))
    }
}

/// Fixed-format float for logs and reports, so reruns are byte-identical.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.8e}")
}
