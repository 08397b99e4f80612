//! Search-phase hyperparameter presets for the differentiable update rules.
//!
//! Each method carries the full training recipe it was published with, so a
//! run manifest can echo exactly what a trial used. The toy harness scales
//! the recipes down to desk size while keeping every method-specific knob.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::LhdError;
use crate::toysearch::methods::Method;
use crate::Result;

/// One method's search-phase recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub learning_rate_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub init_channels: usize,
    pub layers: usize,
    pub arch_learning_rate: f64,
    pub arch_weight_decay: f64,
    /// Method-specific extras keyed by name, e.g. `warmup`, `temp`, `k`.
    #[serde(default)]
    pub additional: BTreeMap<String, f64>,
}

impl SearchConfig {
    /// The reference first-order recipe every other preset inherits from.
    fn reference() -> Self {
        SearchConfig {
            batch_size: 176,
            learning_rate: 0.025,
            learning_rate_min: 3e-4,
            momentum: 0.9,
            weight_decay: 3e-4,
            epochs: 50,
            init_channels: 16,
            layers: 8,
            arch_learning_rate: 3e-4,
            arch_weight_decay: 0.0,
            additional: BTreeMap::new(),
        }
    }

    /// Published search recipe for a method, at full scale.
    pub fn paper_defaults(method: Method) -> Self {
        let mut cfg = Self::reference();
        let mut extra = |k: &str, v: f64| {
            cfg.additional.insert(k.to_string(), v);
        };
        match method {
            Method::Darts | Method::Drnas | Method::Random => {}
            Method::DartsMinus | Method::SurgeNas => {
                extra("beta_start", 1.0);
                extra("beta_end", 0.0);
            }
            Method::Milenas => extra("lambda", 1.0),
            Method::GaeaBilevel | Method::GaeaErm => {
                cfg.arch_learning_rate = 0.1;
            }
            Method::Gdas => {
                cfg.batch_size = 256;
                cfg.learning_rate = 0.05;
                extra("tau_min", 0.1);
                extra("tau_max", 10.0);
            }
            Method::SpDarts => {
                cfg.learning_rate_min = 0.025;
                extra("warmup", 5.0);
                extra("temp", 0.0015);
            }
            Method::PcDarts => {
                cfg.batch_size = 576;
                cfg.learning_rate = 0.1;
                cfg.arch_learning_rate = 6e-4;
                extra("warmup", 15.0);
                extra("k", 4.0);
            }
            Method::BetaDarts => {
                extra("weight_start", 0.0);
                extra("weight_end", 100.0);
            }
        }
        cfg
    }

    /// Desk-scale recipe: same knobs, sized for the synthetic task.
    pub fn toy(method: Method) -> Self {
        let mut cfg = Self::paper_defaults(method);
        cfg.batch_size = 16;
        cfg.epochs = 14;
        cfg.init_channels = 8;
        cfg.layers = 1;
        match method {
            Method::SpDarts => {
                cfg.additional.insert("warmup".into(), 2.0);
            }
            Method::PcDarts => {
                cfg.additional.insert("warmup".into(), 3.0);
            }
            _ => {}
        }
        cfg
    }

    /// Extra knob by name, with a fallback.
    pub fn additional_or(&self, key: &str, default: f64) -> f64 {
        self.additional.get(key).copied().unwrap_or(default)
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("init_channels", self.init_channels as f64),
            ("layers", self.layers as f64),
            ("arch_learning_rate", self.arch_learning_rate),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(LhdError::SearchFailure(format!("{name} must be positive")));
            }
        }
        let nonneg = [
            ("learning_rate_min", self.learning_rate_min),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("arch_weight_decay", self.arch_weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(LhdError::SearchFailure(format!(
                    "{name} must be non-negative"
                )));
            }
        }
        if self.epochs == 0 {
            return Err(LhdError::SearchFailure("epochs must be at least 1".into()));
        }
        for (k, v) in &self.additional {
            if !v.is_finite() {
                return Err(LhdError::SearchFailure(format!(
                    "additional knob {k} must be finite"
                )));
            }
        }
        Ok(())
    }
}
