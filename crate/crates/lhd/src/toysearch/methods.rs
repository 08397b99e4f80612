//! The twelve architecture-update rules the toy harness can run, plus the
//! optimizers and annealing schedules they share.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::LhdError;
use crate::toysearch::tape::Matrix;

/// Architecture-search update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Darts,
    Milenas,
    GaeaErm,
    GaeaBilevel,
    Gdas,
    Drnas,
    SpDarts,
    BetaDarts,
    DartsMinus,
    #[serde(rename = "surgenas")]
    SurgeNas,
    PcDarts,
    Random,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::Darts,
        Method::Milenas,
        Method::GaeaErm,
        Method::GaeaBilevel,
        Method::Gdas,
        Method::Drnas,
        Method::SpDarts,
        Method::BetaDarts,
        Method::DartsMinus,
        Method::SurgeNas,
        Method::PcDarts,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Darts => "darts",
            Method::Milenas => "milenas",
            Method::GaeaErm => "gaea-erm",
            Method::GaeaBilevel => "gaea-bilevel",
            Method::Gdas => "gdas",
            Method::Drnas => "drnas",
            Method::SpDarts => "sp-darts",
            Method::BetaDarts => "beta-darts",
            Method::DartsMinus => "darts-minus",
            Method::SurgeNas => "surgenas",
            Method::PcDarts => "pc-darts",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = LhdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let canon = s.trim().to_ascii_lowercase().replace('_', "-");
        let m = match canon.as_str() {
            "darts" => Method::Darts,
            "milenas" => Method::Milenas,
            "gaea-erm" | "gaea-e" => Method::GaeaErm,
            "gaea-bilevel" | "gaea-b" => Method::GaeaBilevel,
            "gdas" => Method::Gdas,
            "drnas" => Method::Drnas,
            "sp-darts" => Method::SpDarts,
            "beta-darts" => Method::BetaDarts,
            "darts-minus" | "darts-" => Method::DartsMinus,
            "surgenas" | "surge-nas" => Method::SurgeNas,
            "pc-darts" => Method::PcDarts,
            "random" => Method::Random,
            _ => {
                return Err(LhdError::SearchFailure(format!(
                    "unknown method '{s}', expected one of: {}",
                    Method::ALL.map(|m| m.name()).join(", ")
                )))
            }
        };
        Ok(m)
    }
}

/// SGD with momentum and weight decay, one velocity buffer per slot.
pub struct SgdMomentum {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Matrix>>,
}

impl SgdMomentum {
    pub fn new(n_slots: usize, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: vec![None; n_slots],
        }
    }

    pub fn step(&mut self, slot: usize, param: &mut Matrix, grad: &Matrix, lr: f64) {
        let v = self.velocity[slot].get_or_insert_with(|| Matrix::zeros(param.rows, param.cols));
        for ((w, g), vel) in param.data.iter_mut().zip(&grad.data).zip(&mut v.data) {
            let g = g + self.weight_decay * *w;
            *vel = self.momentum * *vel + g;
            *w -= lr * *vel;
        }
    }
}

/// Adam with decoupled slot state; weight decay enters through the gradient.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(n_slots: usize, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: vec![None; n_slots],
            v: vec![None; n_slots],
            t: vec![0; n_slots],
        }
    }

    pub fn step(&mut self, slot: usize, param: &mut Matrix, grad: &Matrix, lr: f64) {
        let m = self.m[slot].get_or_insert_with(|| Matrix::zeros(param.rows, param.cols));
        let v = self.v[slot].get_or_insert_with(|| Matrix::zeros(param.rows, param.cols));
        self.t[slot] += 1;
        let t = self.t[slot] as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (((w, g), m), v) in param
            .data
            .iter_mut()
            .zip(&grad.data)
            .zip(&mut m.data)
            .zip(&mut v.data)
        {
            let g = g + self.weight_decay * *w;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Multiplicative-weights step on a distribution stored chunk-wise: each
/// chunk of `chunk` entries is itself a probability vector and stays one.
pub fn exp_gradient_update(dist: &mut Matrix, grad: &Matrix, lr: f64, chunk: usize) {
    assert!(dist.same_shape(grad), "distribution/gradient shape mismatch");
    assert!(chunk > 0 && dist.data.len() % chunk == 0, "bad chunk size");
    for (ws, gs) in dist
        .data
        .chunks_mut(chunk)
        .zip(grad.data.chunks(chunk))
    {
        let mut total = 0.0;
        for (w, g) in ws.iter_mut().zip(gs) {
            let e = (-lr * g).clamp(-50.0, 50.0);
            *w *= e.exp();
            total += *w;
        }
        if total > 0.0 {
            for w in ws.iter_mut() {
                *w /= total;
            }
        } else {
            let uniform = 1.0 / chunk as f64;
            for w in ws.iter_mut() {
                *w = uniform;
            }
        }
    }
}

/// Cosine decay from `lr_max` to `lr_min`, hitting both endpoints exactly.
pub fn cosine_lr(lr_max: f64, lr_min: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let progress = epoch as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Straight line from `start` at epoch 0 to `end` at the final epoch.
pub fn linear_schedule(start: f64, end: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let progress = epoch as f64 / (total - 1) as f64;
    start + (end - start) * progress
}

/// Temperature anneal used by the smoothing-and-pruning rule: flat at 1
/// during warmup, then geometric decay reaching `final_temp` exactly at the
/// last epoch.
pub fn sp_temperature(final_temp: f64, warmup: usize, epoch: usize, total: usize) -> f64 {
    assert!(final_temp > 0.0, "temperature must be positive");
    if epoch < warmup {
        return 1.0;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup).max(1);
    let progress = (epoch - warmup) as f64 / span as f64;
    final_temp.powf(progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        assert_eq!("GAEA-B".parse::<Method>().unwrap(), Method::GaeaBilevel);
        assert_eq!("gaea_e".parse::<Method>().unwrap(), Method::GaeaErm);
        assert!("dartsv2".parse::<Method>().is_err());
        assert_eq!(Method::ALL.len(), 12);
    }

    #[test]
    fn sgd_momentum_matches_hand_rollout() {
        let mut opt = SgdMomentum::new(1, 0.9, 0.0);
        let mut w = Matrix::row(&[1.0]);
        let g = Matrix::row(&[0.5]);
        opt.step(0, &mut w, &g, 0.1);
        assert!((w.data[0] - 0.95).abs() < 1e-15);
        opt.step(0, &mut w, &g, 0.1);
        let expected = 0.95 - 0.1 * (0.9 * 0.5 + 0.5);
        assert!((w.data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_shrinks_weights() {
        let mut opt = SgdMomentum::new(1, 0.0, 0.1);
        let mut w = Matrix::row(&[2.0]);
        let g = Matrix::zeros(1, 1);
        opt.step(0, &mut w, &g, 0.5);
        assert!((w.data[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_unit_scale() {
        let mut opt = Adam::new(1, 0.5, 0.999, 0.0);
        let mut w = Matrix::row(&[0.0]);
        let g = Matrix::row(&[3.0]);
        opt.step(0, &mut w, &g, 0.01);
        assert!((w.data[0] + 0.01).abs() < 1e-6, "got {}", w.data[0]);
    }

    #[test]
    fn exp_gradient_preserves_simplex_over_many_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let chunk = 7;
        let mut dist = Matrix::filled(1, 2 * chunk, 1.0 / chunk as f64);
        for _ in 0..10_000 {
            let grad = Matrix::randn(1, 2 * chunk, 3.0, &mut rng);
            exp_gradient_update(&mut dist, &grad, 0.1, chunk);
            for ws in dist.data.chunks(chunk) {
                let sum: f64 = ws.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "chunk sum {sum}");
                assert!(ws.iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
        }
    }

    #[test]
    fn exp_gradient_moves_mass_toward_low_loss() {
        let mut dist = Matrix::filled(1, 4, 0.25);
        let grad = Matrix::row(&[1.0, 0.0, 0.0, 0.0]);
        exp_gradient_update(&mut dist, &grad, 1.0, 4);
        assert!(dist.data[0] < 0.25);
        assert!(dist.data[1] > 0.25);
        assert!((dist.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extreme_gradients_stay_finite() {
        let mut dist = Matrix::filled(1, 3, 1.0 / 3.0);
        let grad = Matrix::row(&[1e308, -1e308, 0.0]);
        exp_gradient_update(&mut dist, &grad, 1.0, 3);
        assert!(dist.data.iter().all(|w| w.is_finite()));
        assert!((dist.data.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_schedule_hits_exact_endpoints() {
        let (lr, lr_min, total) = (0.025, 3e-4, 50);
        assert_eq!(cosine_lr(lr, lr_min, 0, total), lr);
        assert_eq!(cosine_lr(lr, lr_min, total - 1, total), lr_min);
        let mid = cosine_lr(lr, lr_min, 25, total);
        assert!(mid < lr && mid > lr_min);
        assert_eq!(cosine_lr(lr, lr_min, 0, 1), lr);
        for e in 1..total {
            assert!(cosine_lr(lr, lr_min, e, total) <= cosine_lr(lr, lr_min, e - 1, total));
        }
    }

    #[test]
    fn linear_schedule_hits_exact_endpoints() {
        assert_eq!(linear_schedule(1.0, 0.0, 0, 14), 1.0);
        assert_eq!(linear_schedule(1.0, 0.0, 13, 14), 0.0);
        assert_eq!(linear_schedule(0.0, 100.0, 0, 50), 0.0);
        assert_eq!(linear_schedule(0.0, 100.0, 49, 50), 100.0);
        assert_eq!(linear_schedule(10.0, 0.1, 0, 1), 10.0);
        let mid = linear_schedule(10.0, 0.1, 7, 15);
        assert!((mid - 5.05).abs() < 1e-12);
    }

    #[test]
    fn sp_temperature_warmup_then_exact_final() {
        let (temp, warmup, total) = (0.0015, 5, 50);
        for e in 0..warmup {
            assert_eq!(sp_temperature(temp, warmup, e, total), 1.0);
        }
        assert_eq!(sp_temperature(temp, warmup, warmup, total), 1.0);
        assert_eq!(sp_temperature(temp, warmup, total - 1, total), temp);
        for e in warmup..total {
            let now = sp_temperature(temp, warmup, e, total);
            let prev = sp_temperature(temp, warmup, e - 1, total);
            assert!(now <= prev + 1e-15);
        }
        assert_eq!(sp_temperature(0.5, 10, 3, 5), 1.0);
    }
}
