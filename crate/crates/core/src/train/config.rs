use std::fmt::Write as _;

use crate::blocks::config::KeyValues;
use crate::error::{Error, Result};

/// Keys read by [`TrainConfig::from_kv`]; they share a file with the model keys.
pub const TRAIN_KEYS: [&str; 11] = [
    "patch",
    "batch",
    "steps",
    "lr",
    "milestones",
    "gamma",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "samples",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Low-resolution patch side.
    pub patch: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Number of synthetic image pairs.
    pub samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            batch: 4,
            steps: 300,
            lr: 2e-4,
            milestones: Vec::new(),
            gamma: 0.5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            seed: 0,
            samples: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.batch == 0 || self.samples == 0 {
            return Err(Error::Config("patch, batch and samples must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("need 0 <= beta < 1 and eps > 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing: {:?}",
                self.milestones
            )));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.steps {
                return Err(Error::Config(format!("milestone {last} not below steps {}", self.steps)));
            }
        }
        Ok(())
    }

    /// Reads training keys, falling back to defaults; unknown keys are left to the caller.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            patch: kv.get("patch")?.unwrap_or(d.patch),
            batch: kv.get("batch")?.unwrap_or(d.batch),
            steps: kv.get("steps")?.unwrap_or(d.steps),
            lr: kv.get("lr")?.unwrap_or(d.lr),
            milestones: match kv.raw("milestones") {
                Some(s) if s.trim().is_empty() => Vec::new(),
                _ => kv.list("milestones")?.unwrap_or(d.milestones),
            },
            gamma: kv.get("gamma")?.unwrap_or(d.gamma),
            beta1: kv.get("beta1")?.unwrap_or(d.beta1),
            beta2: kv.get("beta2")?.unwrap_or(d.beta2),
            eps: kv.get("eps")?.unwrap_or(d.eps),
            seed: kv.get("seed")?.unwrap_or(d.seed),
            samples: kv.get("samples")?.unwrap_or(d.samples),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(&TRAIN_KEYS)?;
        Self::from_kv(&kv)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ms: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        for (k, v) in [
            ("patch", self.patch.to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("milestones", ms.join(",")),
            ("gamma", self.gamma.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("samples", self.samples.to_string()),
        ] {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let c = TrainConfig {
            milestones: vec![10, 200],
            seed: 7,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
        let d = TrainConfig::default();
        assert_eq!((d.beta1, d.beta2, d.eps, d.lr, d.gamma), (0.9, 0.99, 1e-8, 2e-4, 0.5));
    }

    #[test]
    fn milestone_rules() {
        assert!(TrainConfig::parse("steps = 100\nmilestones = 10, 10").is_err());
        assert!(TrainConfig::parse("steps = 100\nmilestones = 50, 20").is_err());
        assert!(TrainConfig::parse("steps = 100\nmilestones = 100").is_err());
        assert!(TrainConfig::parse("steps = 100\nmilestones = 10, 99").is_ok());
        assert!(TrainConfig::parse("lr = -1").is_err());
        assert!(TrainConfig::parse("momentum = 0.9").is_err());
    }
}
