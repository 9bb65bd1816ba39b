//! Absorbing-state (masked) discrete diffusion: vocabulary, noise schedule,
//! forward corruption, reverse kernel and the unconstrained sampler.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CdcError, Result};

pub type TokenId = usize;

/// Per-trajectory random stream.
pub type TrajectoryRng = ChaCha8Rng;

pub fn trajectory_rng(seed: u64) -> TrajectoryRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for sub-stream `index` of `seed` (splitmix64 finalizer).
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    mask_id: TokenId,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, mask: &str) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(invalid("vocabulary needs at least two tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(invalid(format!("duplicate token {tok:?}")));
            }
        }
        let mask_id = *index
            .get(mask)
            .ok_or_else(|| invalid(format!("mask token {mask:?} not in vocabulary")))?;
        Ok(Self {
            tokens,
            index,
            mask_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn mask_token(&self) -> &str {
        &self.tokens[self.mask_id]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Retention probabilities `alpha[0..=T]` with `alpha[0] = 1` and `alpha[T] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs T >= 1"));
        }
        let t_max = steps as f64;
        let alpha = (0..=steps)
            .map(|t| {
                if t == 0 {
                    1.0
                } else if t == steps {
                    0.0
                } else {
                    let s = t as f64 / t_max;
                    match kind {
                        ScheduleKind::Linear => 1.0 - s,
                        ScheduleKind::Cosine => (std::f64::consts::FRAC_PI_2 * s).cos(),
                    }
                }
            })
            .collect();
        Ok(Self { kind, alpha })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// One-step retention `alpha_t / alpha_{t-1}`.
    pub fn step_retention(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(self.alpha[t] / self.alpha[t - 1])
    }

    /// Reverse-kernel coefficients `(gamma_t, eta_t)`: probability that a masked
    /// position stays masked, and the weight on the clean-token proposal.
    pub fn gamma_eta(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!(
                "no reverse step at timestep {t} (valid 1..={})",
                self.steps()
            )));
        }
        let a_prev = self.alpha[t - 1];
        let a_t = self.alpha[t];
        let denom = 1.0 - a_t;
        if denom <= 0.0 {
            return Err(invalid(format!("alpha_{t} = 1 leaves the kernel undefined")));
        }
        // eta = (alpha_{t-1} - alpha_t) / (1 - alpha_t), written as 1 - gamma so the pair sums to 1 exactly
        let gamma = (1.0 - a_prev) / denom;
        Ok((gamma, 1.0 - gamma))
    }
}

/// A partially masked sequence at a given timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenState {
    pub tokens: Vec<TokenId>,
    pub mask_id: TokenId,
    pub timestep: usize,
}

impl TokenState {
    pub fn new(tokens: Vec<TokenId>, mask_id: TokenId, timestep: usize) -> Self {
        Self {
            tokens,
            mask_id,
            timestep,
        }
    }

    pub fn all_masked(len: usize, mask_id: TokenId, timestep: usize) -> Self {
        Self::new(vec![mask_id; len], mask_id, timestep)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_id
    }

    pub fn n_masked(&self) -> usize {
        self.tokens.iter().filter(|&&x| x == self.mask_id).count()
    }

    pub fn committed_fraction(&self) -> f64 {
        if self.tokens.is_empty() {
            return 1.0;
        }
        1.0 - self.n_masked() as f64 / self.tokens.len() as f64
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.tokens.iter().find(|&&x| x >= vocab_size) {
            Some(bad) => Err(invalid(format!("token id {bad} outside vocabulary"))),
            None => Ok(()),
        }
    }
}

/// Row-stochastic `L x |V|` matrix of clean-token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanProposal {
    probs: Vec<f64>,
    len: usize,
    vocab_size: usize,
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

impl CleanProposal {
    /// Builds a proposal from rows, checking normalization and zero mask mass.
    pub fn from_rows(rows: Vec<Vec<f64>>, mask_id: TokenId) -> Result<Self> {
        let len = rows.len();
        let vocab_size = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(len * vocab_size);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != vocab_size {
                return Err(invalid(format!("row {i} has width {}", row.len())));
            }
            probs.extend(row);
        }
        let p = Self {
            probs,
            len,
            vocab_size,
        };
        p.validate(mask_id)?;
        Ok(p)
    }

    pub(crate) fn from_flat_unchecked(probs: Vec<f64>, len: usize, vocab_size: usize) -> Self {
        debug_assert_eq!(probs.len(), len * vocab_size);
        Self {
            probs,
            len,
            vocab_size,
        }
    }

    pub fn one_hot(tokens: &[TokenId], vocab_size: usize) -> Self {
        let mut probs = vec![0.0; tokens.len() * vocab_size];
        for (i, &tok) in tokens.iter().enumerate() {
            probs[i * vocab_size + tok] = 1.0;
        }
        Self::from_flat_unchecked(probs, tokens.len(), vocab_size)
    }

    pub fn validate(&self, mask_id: TokenId) -> Result<()> {
        for i in 0..self.len {
            let row = self.row(i);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(invalid(format!("row {i} sums to {sum}")));
            }
            if mask_id < self.vocab_size && row[mask_id] != 0.0 {
                return Err(invalid(format!("row {i} puts mass on the mask token")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.probs[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.vocab_size.max(1)).take(self.len)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.probs
    }
}

/// Conditioning context: prompt tokens plus a reserved buffer of feedback slots.
///
/// The buffer is never sampled into; its length is fixed for a trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub prompt: Vec<TokenId>,
    pub buffer: Vec<TokenId>,
    pub family: usize,
    pub mask_id: TokenId,
}

impl Context {
    pub fn new(prompt: Vec<TokenId>, buffer_len: usize, family: usize, mask_id: TokenId) -> Self {
        Self {
            prompt,
            buffer: vec![mask_id; buffer_len],
            family,
            mask_id,
        }
    }

    pub fn empty(mask_id: TokenId) -> Self {
        Self::new(Vec::new(), 0, 0, mask_id)
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Written buffer tokens; trailing mask slots are excluded.
    pub fn buffer_message(&self) -> &[TokenId] {
        let end = self
            .buffer
            .iter()
            .position(|&t| t == self.mask_id)
            .unwrap_or(self.buffer.len());
        &self.buffer[..end]
    }

    pub fn has_feedback(&self) -> bool {
        self.buffer.first().is_some_and(|&t| t != self.mask_id)
    }
}

/// The frozen clean-state predictor `x_theta(x_t, t)`.
///
/// Implementations must be deterministic and callable from many trajectories at once.
pub trait Denoiser: Sync {
    fn vocab_size(&self) -> usize;

    fn predict(&self, state: &TokenState, context: &Context) -> Result<CleanProposal>;
}

/// Masks each position independently with probability `1 - alpha_t`.
pub fn forward_corrupt(
    x0: &TokenState,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TokenState> {
    if t > schedule.steps() {
        return Err(invalid(format!("timestep {t} beyond T={}", schedule.steps())));
    }
    if x0.n_masked() > 0 {
        return Err(invalid("forward corruption needs a mask-free input"));
    }
    let keep = schedule.alpha(t);
    let tokens = x0
        .tokens
        .iter()
        .map(|&tok| if rng.gen::<f64>() < keep { tok } else { x0.mask_id })
        .collect();
    Ok(TokenState::new(tokens, x0.mask_id, t))
}

/// One reverse transition `x_t -> x_{t-1}` sampling masked positions from `proposal`.
///
/// Committed positions are copied. Each masked position consumes exactly one
/// uniform draw, in ascending position order.
pub fn reverse_step(
    xt: &TokenState,
    proposal: &CleanProposal,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TokenState> {
    if proposal.len() != xt.len() {
        return Err(invalid(format!(
            "proposal has {} rows but state has length {}",
            proposal.len(),
            xt.len()
        )));
    }
    let t = xt.timestep;
    let (gamma, eta) = schedule.gamma_eta(t)?;
    let mut tokens = xt.tokens.clone();
    for (i, tok) in tokens.iter_mut().enumerate() {
        if *tok != xt.mask_id {
            continue;
        }
        let u: f64 = rng.gen();
        if u < gamma {
            continue;
        }
        *tok = sample_row(proposal.row(i), (u - gamma) / eta);
    }
    Ok(TokenState::new(tokens, xt.mask_id, t - 1))
}

/// Inverse-CDF pick from a probability row given `u` in `[0, 1)`.
pub(crate) fn sample_row(row: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (v, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_nonzero = v;
            if u < acc {
                return v;
            }
        }
    }
    last_nonzero
}

/// Runs the unconstrained reverse chain from the all-mask state.
pub fn sample_vanilla(
    denoiser: &dyn Denoiser,
    context: &Context,
    len: usize,
    mask_id: TokenId,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TokenState> {
    if len == 0 {
        return Err(invalid("sequence length must be >= 1"));
    }
    let mut state = TokenState::all_masked(len, mask_id, schedule.steps());
    while state.timestep > 0 {
        let proposal = denoiser.predict(&state, context)?;
        state = reverse_step(&state, &proposal, schedule, rng)?;
    }
    Ok(state)
}

/// JSON block `{"T": int, "kind": ..., "tokens": [...], "mask": "[MASK]"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default)]
    pub kind: ScheduleKind,
    pub tokens: Vec<String>,
    pub mask: String,
}

impl DiffusionConfig {
    pub fn from_parts(schedule: &NoiseSchedule, vocab: &Vocabulary) -> Self {
        Self {
            steps: schedule.steps(),
            kind: schedule.kind(),
            tokens: vocab.tokens().to_vec(),
            mask: vocab.mask_token().to_string(),
        }
    }

    pub fn build(&self) -> Result<(NoiseSchedule, Vocabulary)> {
        Ok((
            NoiseSchedule::new(self.steps, self.kind)?,
            Vocabulary::new(self.tokens.clone(), &self.mask)?,
        ))
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = CdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}
