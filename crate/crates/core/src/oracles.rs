//! Brute-force references: exact sampler distribution by enumeration,
//! central-difference gradients, and the closed-form exponential tilt.

use std::collections::BTreeMap;

use crate::diffusion::{Context, Denoiser, NoiseSchedule, TokenId, TokenState};
use crate::error::{CdcError, Result};

pub const MAX_STATES: usize = 100_000;
pub const MAX_LEN: usize = 4;
pub const MAX_VOCAB: usize = 8;
pub const MAX_STEPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnumerationResult {
    pub probs: BTreeMap<Vec<TokenId>, f64>,
}

impl EnumerationResult {
    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    pub fn prob(&self, seq: &[TokenId]) -> f64 {
        self.probs.get(seq).copied().unwrap_or(0.0)
    }

    /// Total variation to an empirical count table.
    pub fn tv_to_counts(&self, counts: &BTreeMap<Vec<TokenId>, usize>) -> f64 {
        let n: usize = counts.values().sum();
        let mut keys: Vec<&Vec<TokenId>> = self.probs.keys().collect();
        keys.extend(counts.keys().filter(|k| !self.probs.contains_key(*k)));
        let sum: f64 = keys
            .into_iter()
            .map(|k| (self.prob(k) - counts.get(k).map_or(0.0, |&c| c as f64 / n as f64)).abs())
            .sum();
        sum / 2.0
    }
}

/// Exact distribution of the vanilla sampler's final sequence, by forward
/// propagation of the full state distribution through every reverse step.
pub fn exact_posterior(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    len: usize,
    mask_id: TokenId,
    context: &Context,
) -> Result<EnumerationResult> {
    let v = denoiser.vocab_size();
    let states = (v as f64).powi(len as i32);
    if len > MAX_LEN || v > MAX_VOCAB || schedule.steps() > MAX_STEPS || states > MAX_STATES as f64 {
        return Err(CdcError::OracleRefused(format!(
            "enumeration over |V| = {v}, L = {len}, T = {} exceeds the size guard",
            schedule.steps()
        )));
    }
    let mut dist: BTreeMap<Vec<TokenId>, f64> = BTreeMap::from([(vec![mask_id; len], 1.0)]);
    for t in (1..=schedule.steps()).rev() {
        let (gamma, eta) = schedule.gamma_eta(t)?;
        let mut next: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
        for (seq, p) in dist {
            let state = TokenState::new(seq.clone(), mask_id, t);
            let y = denoiser.predict(&state, context)?;
            // outcomes per position: (token, prob)
            let per_pos: Vec<Vec<(TokenId, f64)>> = (0..len)
                .map(|i| {
                    if seq[i] != mask_id {
                        return vec![(seq[i], 1.0)];
                    }
                    let mut o: Vec<(TokenId, f64)> = y
                        .row(i)
                        .iter()
                        .enumerate()
                        .filter(|&(_, &q)| q > 0.0)
                        .map(|(tok, &q)| (tok, eta * q))
                        .collect();
                    if gamma > 0.0 {
                        o.push((mask_id, gamma));
                    }
                    o
                })
                .collect();
            let mut partial: Vec<(Vec<TokenId>, f64)> = vec![(Vec::with_capacity(len), p)];
            for outcomes in &per_pos {
                partial = partial
                    .into_iter()
                    .flat_map(|(s, q)| {
                        outcomes.iter().map(move |&(tok, r)| {
                            let mut s = s.clone();
                            s.push(tok);
                            (s, q * r)
                        })
                    })
                    .collect();
            }
            for (s, q) in partial {
                *next.entry(s).or_default() += q;
            }
        }
        dist = next;
    }
    Ok(EnumerationResult { probs: dist })
}

/// Central differences, one coordinate at a time.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `base(v) exp(-lambda c(v)) / Z`.
pub fn tilt_closed_form(base: &[f64], cost: &[f64], lambda: f64) -> Vec<f64> {
    let shift = base
        .iter()
        .zip(cost)
        .filter(|(b, _)| **b > 0.0)
        .map(|(_, c)| lambda * c)
        .fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = base
        .iter()
        .zip(cost)
        .map(|(b, c)| if *b > 0.0 { b * (-(lambda * c - shift)).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}
