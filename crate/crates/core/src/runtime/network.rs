//! Message delay and loss model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest timeout used when the expected delay is zero, seconds.
pub const MIN_TIMEOUT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageKey {
    pub sender: usize,
    pub receiver: usize,
    pub round: u64,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDelay {
    pub sender: usize,
    pub receiver: usize,
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayRule {
    Constant { delay: f64 },
    /// Listed links use their own delay, every other link uses `default`.
    PerLink { default: f64, links: Vec<LinkDelay> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkModel {
    pub delay: DelayRule,
    pub drop_probability: f64,
    /// Per-layer wait before substituting stale embeddings. `None` uses twice the expected delay.
    pub timeout: Option<f64>,
    /// Virtual compute time of each encode, layer update and decode, seconds.
    pub compute_time: f64,
    pub seed: u64,
    /// Transmissions that are always lost.
    pub forced_drops: Vec<MessageKey>,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            delay: DelayRule::Constant { delay: 0.0 },
            drop_probability: 0.0,
            timeout: None,
            compute_time: 0.0,
            seed: 0,
            forced_drops: Vec::new(),
        }
    }
}

impl NetworkModel {
    pub fn constant(delay: f64) -> Self {
        Self {
            delay: DelayRule::Constant { delay },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad_delay = |d: f64| !(d >= 0.0) || !d.is_finite();
        match &self.delay {
            DelayRule::Constant { delay } if bad_delay(*delay) => {
                return Err(Error::Config(format!("delay must be non-negative, got {delay}")));
            }
            DelayRule::PerLink { default, links }
                if (bad_delay(*default) || links.iter().any(|l| bad_delay(l.delay))) => {
                    return Err(Error::Config("link delays must be non-negative".into()));
                }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::Config(format!("drop_probability must be in [0, 1], got {}", self.drop_probability)));
        }
        if let Some(t) = self.timeout {
            if !(t > 0.0) {
                return Err(Error::Config(format!("timeout must be positive, got {t}")));
            }
        }
        if !(self.compute_time >= 0.0) {
            return Err(Error::Config("compute_time must be non-negative".into()));
        }
        Ok(())
    }

    pub fn link_delay(&self, sender: usize, receiver: usize) -> f64 {
        match &self.delay {
            DelayRule::Constant { delay } => *delay,
            DelayRule::PerLink { default, links } => links
                .iter()
                .find(|l| l.sender == sender && l.receiver == receiver)
                .map_or(*default, |l| l.delay),
        }
    }

    /// Largest delay any link can have.
    pub fn expected_delay(&self) -> f64 {
        match &self.delay {
            DelayRule::Constant { delay } => *delay,
            DelayRule::PerLink { default, links } => links.iter().map(|l| l.delay).fold(*default, f64::max),
        }
    }

    pub fn effective_timeout(&self) -> f64 {
        self.timeout.unwrap_or_else(|| (2.0 * self.expected_delay()).max(MIN_TIMEOUT))
    }

    /// Random source for the drops of one replan round.
    pub fn round_rng(&self, round: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(round);
        rng
    }

    pub fn dropped(&self, key: &MessageKey, rng: &mut ChaCha8Rng) -> bool {
        let random = self.drop_probability > 0.0 && rng.gen::<f64>() < self.drop_probability;
        random || self.forced_drops.contains(key)
    }
}
