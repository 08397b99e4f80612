//! Asynchronous successive halving over sampled architectures.
//!
//! A [`RungLadder`] fixes the resource schedule (geometric in the promotion
//! rate, clamped at the maximum). [`run_asha`] evaluates every arriving
//! candidate at the base rung while the sampling stream lasts, then promotes:
//! a rung holding `k * eta` scored candidates advances its top `k`, scanning
//! from the highest rung down, so populations never exceed the `1/eta`
//! geometry and the best candidate is never blocked. The single-threaded
//! event loop keeps every run deterministic for a fixed seed, and the budget
//! is counted in evaluator-epochs, never in wall-clock time.

use serde::{Deserialize, Serialize};

use crate::error::LhdError;
use crate::Result;

/// Resource schedule for successive halving.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RungLadder {
    pub min_resource: u64,
    pub eta: u64,
    pub max_resource: u64,
    /// Strictly increasing rung resources, ending at or below `max_resource`.
    pub rungs: Vec<u64>,
}

/// Builds the rung schedule `r, r*eta, r*eta^2, ...` clamped at `max`.
pub fn ladder(r: u64, eta: u64, max: u64) -> Result<RungLadder> {
    if r == 0 {
        return Err(LhdError::SearchFailure(
            "minimum resource must be at least 1 epoch".into(),
        ));
    }
    if eta < 2 {
        return Err(LhdError::SearchFailure(format!(
            "promotion rate must be at least 2, got {eta}"
        )));
    }
    if max < r {
        return Err(LhdError::SearchFailure(format!(
            "max resource {max} is below the starting resource {r}"
        )));
    }
    let mut rungs = Vec::new();
    let mut resource = r;
    loop {
        rungs.push(resource);
        if resource >= max {
            break;
        }
        resource = match resource.checked_mul(eta) {
            Some(next) => next.min(max),
            None => max,
        };
    }
    Ok(RungLadder {
        min_resource: r,
        eta,
        max_resource: max,
        rungs,
    })
}

/// One sampled architecture tracked by the scheduler.
#[derive(Debug, Clone)]
pub struct Candidate<T> {
    pub id: usize,
    pub item: T,
    /// Score per rung; `Some` exactly at visited rungs.
    pub scores: Vec<Option<f64>>,
    /// Highest rung index reached.
    pub rung: usize,
}

/// One evaluation performed by the scheduler, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub candidate: usize,
    pub rung: usize,
    pub resource: u64,
    pub score: f64,
}

/// Final scheduler state.
#[derive(Debug, Clone)]
pub struct AshaOutcome<T> {
    pub candidates: Vec<Candidate<T>>,
    /// Index of the best candidate at the highest reached rung.
    pub best: usize,
    pub trace: Vec<TraceEvent>,
    pub epochs_used: u64,
}

impl<T> AshaOutcome<T> {
    pub fn best_candidate(&self) -> &Candidate<T> {
        &self.candidates[self.best]
    }

    /// Number of candidates holding a score at each rung.
    pub fn rung_counts(&self, n_rungs: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n_rungs];
        for c in &self.candidates {
            for (k, s) in c.scores.iter().enumerate() {
                if s.is_some() {
                    counts[k] += 1;
                }
            }
        }
        counts
    }
}

enum Action<T> {
    Promote { candidate: usize, to_rung: usize },
    Fresh(T),
}

/// Runs successive halving until the epoch budget and the sampler are both
/// exhausted. New candidates are evaluated at the base rung as long as the
/// stream and budget allow; promotions then advance the top `1/eta` fraction
/// of each rung, highest rung first. The sampler may return `None` to signal
/// a finite candidate pool; the evaluator must be deterministic per
/// (candidate, resource).
pub fn run_asha<T, R>(
    ladder: &RungLadder,
    mut sampler: impl FnMut(&mut R) -> Option<T>,
    mut evaluator: impl FnMut(&T, u64) -> f64,
    eval_budget_epochs: u64,
    rng: &mut R,
) -> Result<AshaOutcome<T>> {
    if eval_budget_epochs == 0 {
        return Err(LhdError::SearchFailure("epoch budget is zero".into()));
    }
    let n_rungs = ladder.rungs.len();
    let mut candidates: Vec<Candidate<T>> = Vec::new();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_rungs];
    let mut promoted_from: Vec<Vec<bool>> = vec![Vec::new(); n_rungs];
    let mut trace: Vec<TraceEvent> = Vec::new();
    let mut epochs_used: u64 = 0;
    let mut sampler_done = false;

    loop {
        let mut action: Option<Action<T>> = None;
        if !sampler_done && epochs_used + ladder.rungs[0] <= eval_budget_epochs {
            match sampler(rng) {
                Some(item) => action = Some(Action::Fresh(item)),
                None => sampler_done = true,
            }
        }
        if action.is_none() {
            for k in (0..n_rungs.saturating_sub(1)).rev() {
                let cost = ladder.rungs[k + 1];
                if epochs_used + cost > eval_budget_epochs {
                    continue;
                }
                if let Some(idx) =
                    promotable(&candidates, &members[k], &promoted_from[k], k, ladder.eta)
                {
                    action = Some(Action::Promote {
                        candidate: idx,
                        to_rung: k + 1,
                    });
                    break;
                }
            }
        }
        match action {
            None => break,
            Some(Action::Promote { candidate, to_rung }) => {
                let resource = ladder.rungs[to_rung];
                let score = evaluator(&candidates[candidate].item, resource);
                candidates[candidate].scores[to_rung] = Some(score);
                candidates[candidate].rung = to_rung;
                members[to_rung].push(candidate);
                mark_promoted(&mut promoted_from[to_rung - 1], candidate);
                epochs_used += resource;
                trace.push(TraceEvent {
                    candidate,
                    rung: to_rung,
                    resource,
                    score,
                });
            }
            Some(Action::Fresh(item)) => {
                let id = candidates.len();
                let resource = ladder.rungs[0];
                let score = evaluator(&item, resource);
                let mut scores = vec![None; n_rungs];
                scores[0] = Some(score);
                candidates.push(Candidate {
                    id,
                    item,
                    scores,
                    rung: 0,
                });
                members[0].push(id);
                epochs_used += resource;
                trace.push(TraceEvent {
                    candidate: id,
                    rung: 0,
                    resource,
                    score,
                });
            }
        }
    }

    if candidates.is_empty() {
        return Err(LhdError::SearchFailure(
            "budget too small to evaluate any candidate".into(),
        ));
    }
    let top_rung = (0..n_rungs).rev().find(|&k| !members[k].is_empty()).unwrap();
    let best = members[top_rung]
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let sa = candidates[a].scores[top_rung].unwrap();
            let sb = candidates[b].scores[top_rung].unwrap();
            sb.partial_cmp(&sa).unwrap().then_with(|| a.cmp(&b))
        })
        .unwrap();
    Ok(AshaOutcome {
        candidates,
        best,
        trace,
        epochs_used,
    })
}

fn promotable<T>(
    candidates: &[Candidate<T>],
    members: &[usize],
    promoted: &[bool],
    rung: usize,
    eta: u64,
) -> Option<usize> {
    let allowed = members.len() / eta as usize;
    if allowed == 0 {
        return None;
    }
    let mut pool: Vec<usize> = members.to_vec();
    pool.sort_by(|&a, &b| {
        let sa = candidates[a].scores[rung].unwrap();
        let sb = candidates[b].scores[rung].unwrap();
        sb.partial_cmp(&sa).unwrap().then_with(|| a.cmp(&b))
    });
    pool[..allowed]
        .iter()
        .copied()
        .find(|&idx| !promoted.get(idx).copied().unwrap_or(false))
}

fn mark_promoted(flags: &mut Vec<bool>, idx: usize) {
    if flags.len() <= idx {
        flags.resize(idx + 1, false);
    }
    flags[idx] = true;
}

/// Deterministic hash of a byte string, for keying surrogate noise.
pub fn candidate_key(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Maps a 64-bit key to `[0, 1)` through a splitmix finalizer.
pub fn hash01(key: u64) -> f64 {
    let mut z = key.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Stand-in for partial training: a planted quality blurred by noise that
/// fades linearly with resource and vanishes entirely at `max_resource`.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateEvaluator {
    pub max_resource: u64,
    pub noise_scale: f64,
}

impl SurrogateEvaluator {
    /// Score for a candidate with the given planted quality and noise key
    /// when trained for `resource` epochs.
    pub fn score(&self, quality: f64, key: u64, resource: u64) -> f64 {
        let fade = 1.0 - resource as f64 / self.max_resource as f64;
        quality - fade.max(0.0) * self.noise_scale * hash01(key.wrapping_add(resource))
    }
}
