use serde::{Deserialize, Serialize};

/// Linear drain model: a base rate plus costs per sample and per KiB sent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryModel {
    /// Percent at start.
    pub start: f64,
    /// Percent per hour.
    pub base_drain_per_hour: f64,
    pub per_sample: f64,
    pub per_kib_tx: f64,
}

impl Default for BatteryModel {
    fn default() -> Self {
        BatteryModel {
            start: 100.0,
            base_drain_per_hour: 0.5,
            per_sample: 0.0005,
            per_kib_tx: 0.01,
        }
    }
}

impl BatteryModel {
    /// Mains-powered device.
    pub fn powered() -> Self {
        BatteryModel {
            start: 100.0,
            base_drain_per_hour: 0.0,
            per_sample: 0.0,
            per_kib_tx: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=100.0).contains(&self.start) {
            return Err(format!("battery start {} outside [0, 100]", self.start));
        }
        for (name, v) in [
            ("base_drain_per_hour", self.base_drain_per_hour),
            ("per_sample", self.per_sample),
            ("per_kib_tx", self.per_kib_tx),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("battery {name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Battery {
    model: BatteryModel,
    level: f64,
}

impl Battery {
    pub fn new(model: BatteryModel) -> Self {
        Battery {
            level: model.start,
            model,
        }
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    /// Whole percent as reported in keepalives; any charge left reads as at least 1.
    pub fn percent(&self) -> u8 {
        self.level.ceil().clamp(0.0, 100.0) as u8
    }

    pub fn is_empty(&self) -> bool {
        self.level <= 0.0
    }

    fn drain(&mut self, amount: f64) {
        self.level = (self.level - amount).max(0.0);
    }

    pub fn elapse(&mut self, dt_ms: i64) {
        self.drain(self.model.base_drain_per_hour * dt_ms as f64 / 3_600_000.0);
    }

    pub fn sampled(&mut self, samples: u64) {
        self.drain(self.model.per_sample * samples as f64);
    }

    pub fn transmitted(&mut self, bytes: usize) {
        self.drain(self.model.per_kib_tx * bytes as f64 / 1024.0);
    }
}
