use serde::{Deserialize, Serialize};

/// Linear warmup followed by polynomial decay to a floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub decay_steps: u64,
    pub final_lr: f64,
    pub power: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_steps: 10_000,
            peak_lr: 0.01,
            decay_steps: 200_000,
            final_lr: 5e-6,
            power: 2.0,
        }
    }
}

impl Schedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let into = step - self.warmup_steps;
        if into >= self.decay_steps {
            return self.final_lr;
        }
        // final + (peak − final)·r, written so r = 1 gives peak exactly
        let r = (1.0 - into as f64 / self.decay_steps as f64).powf(self.power);
        self.peak_lr * r + self.final_lr * (1.0 - r)
    }
}
