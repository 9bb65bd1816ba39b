//! Reference denoisers: a count-based position/neighbour model and a uniform one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    trajectory_rng, CleanProposal, Context, Denoiser, TokenId, TokenState,
};
use crate::error::{invalid, CdcError, Result};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Interpolation weights (unigram, left neighbour, right neighbour).
    pub mix: [f64; 3],
    pub smoothing: f64,
    /// Neighbour search window on each side.
    pub window: usize,
    /// Weight of the feedback-conditioned tables when the context buffer holds a message.
    pub feedback_weight: f64,
    pub combine: Combine,
    pub neighbours: Neighbours,
}

/// Which committed tokens condition the left/right terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighbours {
    /// Only the closest committed token on each side.
    Nearest,
    /// Every committed token within the window, one factor per token.
    #[default]
    Window,
}

/// How the three component distributions are interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// Weighted arithmetic mean.
    Linear,
    /// Weighted geometric mean, renormalized.
    #[default]
    Product,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            mix: [0.2, 0.4, 0.4],
            smoothing: 0.01,
            window: 4,
            feedback_weight: 0.8,
            combine: Combine::default(),
            neighbours: Neighbours::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mix.iter().any(|&w| !(w >= 0.0)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mix weights {:?} must be >= 0 and sum to 1", self.mix)));
        }
        if !(self.smoothing > 0.0) {
            return Err(invalid("smoothing must be positive"));
        }
        if self.window == 0 {
            return Err(invalid("window must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.feedback_weight) {
            return Err(invalid("feedback_weight must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Count tables. `left[d-1][u][v]` counts token `v` with token `u` exactly `d`
/// positions to its left; `right` mirrors it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTables {
    pub max_len: usize,
    pub unigram: Vec<Vec<f64>>,
    pub left: Vec<Vec<Vec<f64>>>,
    pub right: Vec<Vec<Vec<f64>>>,
}

impl CountTables {
    fn train(programs: &[Vec<TokenId>], vocab_size: usize, window: usize) -> Self {
        let max_len = programs.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let mut t = Self {
            max_len,
            unigram: vec![vec![0.0; vocab_size]; max_len],
            left: vec![vec![vec![0.0; vocab_size]; vocab_size]; window],
            right: vec![vec![vec![0.0; vocab_size]; vocab_size]; window],
        };
        for p in programs {
            for (i, &v) in p.iter().enumerate() {
                t.unigram[i][v] += 1.0;
                for d in 1..=window {
                    if i >= d {
                        t.left[d - 1][p[i - d]][v] += 1.0;
                    }
                    if i + d < p.len() {
                        t.right[d - 1][p[i + d]][v] += 1.0;
                    }
                }
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramDenoiser {
    pub version: u32,
    pub vocab_size: usize,
    pub mask_id: TokenId,
    pub config: DenoiserConfig,
    pub tables: CountTables,
    /// Tables fit on safe programs, consulted when the context carries feedback.
    #[serde(default)]
    pub feedback: Option<CountTables>,
}

pub fn train_denoiser(
    programs: &[Vec<TokenId>],
    vocab_size: usize,
    mask_id: TokenId,
    config: &DenoiserConfig,
) -> Result<NgramDenoiser> {
    config.validate()?;
    if programs.is_empty() {
        return Err(invalid("cannot train a denoiser on an empty corpus"));
    }
    check_programs(programs, vocab_size, mask_id)?;
    Ok(NgramDenoiser {
        version: MODEL_VERSION,
        vocab_size,
        mask_id,
        config: config.clone(),
        tables: CountTables::train(programs, vocab_size, config.window),
        feedback: None,
    })
}

fn check_programs(programs: &[Vec<TokenId>], vocab_size: usize, mask_id: TokenId) -> Result<()> {
    for (i, p) in programs.iter().enumerate() {
        if p.iter().any(|&t| t >= vocab_size || t == mask_id) {
            return Err(invalid(format!("training program {i} has out-of-vocabulary or mask tokens")));
        }
    }
    Ok(())
}

impl NgramDenoiser {
    /// Adds tables fit on `programs` for feedback-conditioned prediction.
    pub fn with_feedback_tables(mut self, programs: &[Vec<TokenId>]) -> Result<Self> {
        if programs.is_empty() {
            return Err(invalid("feedback corpus is empty"));
        }
        check_programs(programs, self.vocab_size, self.mask_id)?;
        self.feedback = Some(CountTables::train(programs, self.vocab_size, self.config.window));
        Ok(self)
    }

    fn smoothed(&self, counts: &[f64], out: &mut [f64], weight: f64) {
        let s = self.config.smoothing;
        let total: f64 = counts
            .iter()
            .enumerate()
            .filter(|&(v, _)| v != self.mask_id)
            .map(|(_, c)| c)
            .sum::<f64>()
            + s * (self.vocab_size - 1) as f64;
        for (v, o) in out.iter_mut().enumerate() {
            if v == self.mask_id {
                continue;
            }
            let p = (counts[v] + s) / total;
            *o += match self.config.combine {
                Combine::Linear => weight * p,
                Combine::Product => weight * p.ln(),
            };
        }
    }

    /// Component distribution of one table set at masked position `i`, written into `out`.
    fn masked_row(&self, tables: &CountTables, tokens: &[TokenId], i: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let [wu, wl, wr] = self.config.mix;
        let uni = &tables.unigram[i.min(tables.max_len - 1)];
        self.smoothed(uni, out, wu);
        let w = self.config.window;
        let left: Vec<(usize, TokenId)> = (1..=w.min(i))
            .map(|d| (d, tokens[i - d]))
            .filter(|&(_, t)| t != self.mask_id)
            .collect();
        let right: Vec<(usize, TokenId)> = (1..=w)
            .take_while(|d| i + d < tokens.len())
            .map(|d| (d, tokens[i + d]))
            .filter(|&(_, t)| t != self.mask_id)
            .collect();
        let take = match self.config.neighbours {
            Neighbours::Nearest => 1,
            Neighbours::Window => w,
        };
        for (side, table, weight) in [(&left, &tables.left, wl), (&right, &tables.right, wr)] {
            if side.is_empty() {
                self.smoothed(uni, out, weight);
            }
            for &(d, u) in side.iter().take(take) {
                self.smoothed(&table[d - 1][u], out, weight);
            }
        }
        if self.config.combine == Combine::Product {
            let max = out
                .iter()
                .enumerate()
                .filter(|&(v, _)| v != self.mask_id)
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            for (v, x) in out.iter_mut().enumerate() {
                *x = if v == self.mask_id { 0.0 } else { (*x - max).exp() };
            }
        }
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|x| *x /= z);
    }

    pub fn predict_tokens(&self, tokens: &[TokenId], context: &Context) -> Result<CleanProposal> {
        let n = self.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= n) {
            return Err(invalid(format!("token id {bad} outside vocabulary")));
        }
        let feedback = self.feedback.as_ref().filter(|_| context.has_feedback());
        let fw = if feedback.is_some() {
            self.config.feedback_weight
        } else {
            0.0
        };
        let mut probs = vec![0.0; tokens.len() * n];
        let mut scratch = vec![0.0; n];
        for (i, row) in probs.chunks_mut(n).enumerate() {
            if tokens[i] != self.mask_id {
                row[tokens[i]] = 1.0;
                continue;
            }
            self.masked_row(&self.tables, tokens, i, row);
            if let Some(fb) = feedback {
                self.masked_row(fb, tokens, i, &mut scratch);
                for (r, f) in row.iter_mut().zip(&scratch) {
                    *r = (1.0 - fw) * *r + fw * f;
                }
            }
        }
        Ok(CleanProposal::from_flat_unchecked(probs, tokens.len(), n))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.version != MODEL_VERSION {
            return Err(CdcError::Config(format!(
                "denoiser file version {} (expected {MODEL_VERSION})",
                m.version
            )));
        }
        m.config.validate()?;
        Ok(m)
    }
}

impl Denoiser for NgramDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(&self, state: &TokenState, context: &Context) -> Result<CleanProposal> {
        if state.mask_id != self.mask_id {
            return Err(CdcError::Denoiser(format!(
                "state mask id {} does not match model mask id {}",
                state.mask_id, self.mask_id
            )));
        }
        self.predict_tokens(&state.tokens, context)
    }
}

/// Uniform over clean tokens at masked positions, one-hot at committed ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformDenoiser {
    pub vocab_size: usize,
    pub mask_id: TokenId,
}

impl Denoiser for UniformDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(&self, state: &TokenState, _context: &Context) -> Result<CleanProposal> {
        let n = self.vocab_size;
        let p = 1.0 / (n - 1) as f64;
        let mut probs = vec![0.0; state.len() * n];
        for (i, row) in probs.chunks_mut(n).enumerate() {
            if state.tokens[i] == self.mask_id {
                row.iter_mut().for_each(|x| *x = p);
                row[self.mask_id] = 0.0;
            } else {
                row[state.tokens[i]] = 1.0;
            }
        }
        Ok(CleanProposal::from_flat_unchecked(probs, state.len(), n))
    }
}

/// Masked-token perplexity: each position is hidden with probability 1/2
/// (seeded) and scored from its neighbours.
pub fn perplexity(
    model: &dyn Denoiser,
    programs: &[Vec<TokenId>],
    mask_id: TokenId,
    seed: u64,
) -> Result<f64> {
    let mut rng = trajectory_rng(seed);
    let ctx = Context::empty(mask_id);
    let (mut nll, mut count) = (0.0, 0usize);
    for p in programs {
        let mut tokens = p.clone();
        let hidden: Vec<usize> = (0..p.len()).filter(|_| rng.gen_bool(0.5)).collect();
        for &i in &hidden {
            tokens[i] = mask_id;
        }
        let proposal = model.predict(&TokenState::new(tokens, mask_id, 0), &ctx)?;
        for &i in &hidden {
            nll -= proposal.row(i)[p[i]].ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("no positions were scored"));
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::{gen_corpus, lex, mask_id, tok, vocab, CorpusConfig};

    fn model(programs: &[Vec<TokenId>]) -> NgramDenoiser {
        train_denoiser(programs, vocab().len(), mask_id(), &DenoiserConfig::default()).unwrap()
    }

    fn argmax(row: &[f64]) -> TokenId {
        let mut best = 0;
        for (v, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = v;
            }
        }
        best
    }

    #[test]
    fn single_program_unigram() {
        let m = model(&[lex("let a = 1 ;").unwrap()]);
        let ctx = Context::empty(mask_id());
        let p = m.predict(&TokenState::all_masked(5, mask_id(), 1), &ctx).unwrap();
        assert_eq!(argmax(p.row(0)), tok("let"));
        p.validate(mask_id()).unwrap();
        for r in p.rows() {
            assert!(r.iter().all(|&x| x > 0.0 || x == 0.0));
        }
    }

    #[test]
    fn all_mask_rows_equal_smoothed_unigram() {
        let progs = gen_corpus(&CorpusConfig::functional(50), 2).unwrap().programs;
        let m = model(&progs);
        let p = m.predict(&TokenState::all_masked(24, mask_id(), 1), &Context::empty(mask_id())).unwrap();
        for i in 0..24 {
            let counts = &m.tables.unigram[i];
            let total: f64 = counts.iter().sum::<f64>() + 0.01 * 40.0;
            let expect: Vec<f64> = (0..vocab().len())
                .map(|v| if v == mask_id() { 0.0 } else { (counts[v] + 0.01) / total })
                .collect();
            for (a, b) in p.row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unseen_tokens_have_mass_and_mask_has_none() {
        let cfg = DenoiserConfig {
            smoothing: 1.0,
            ..DenoiserConfig::default()
        };
        let m = train_denoiser(&[lex("let a = 1 ;").unwrap()], vocab().len(), mask_id(), &cfg).unwrap();
        let p = m.predict(&TokenState::all_masked(5, mask_id(), 1), &Context::empty(mask_id())).unwrap();
        assert!(p.row(2)[tok("exec")] > 0.0);
        assert_eq!(p.row(2)[mask_id()], 0.0);
    }

    #[test]
    fn committed_rows_are_one_hot() {
        let m = model(&[lex("let a = 1 ;").unwrap()]);
        let t = lex("let b = 2 ;").unwrap();
        let p = m.predict(&TokenState::new(t.clone(), mask_id(), 1), &Context::empty(mask_id())).unwrap();
        assert_eq!(p, CleanProposal::one_hot(&t, vocab().len()));
    }

    #[test]
    fn let_is_followed_by_identifier() {
        let progs = gen_corpus(&CorpusConfig::functional(500), 4).unwrap().programs;
        let m = model(&progs);
        let mut t = vec![mask_id(); 24];
        t[0] = tok("let");
        let p = m.predict(&TokenState::new(t, mask_id(), 1), &Context::empty(mask_id())).unwrap();
        assert!(crate::minilang::lexer::IDENTIFIERS.contains(&vocab().token(argmax(p.row(1)))));
    }

    #[test]
    fn trained_beats_uniform_perplexity() {
        let train = gen_corpus(&CorpusConfig::functional(1000), 6).unwrap().programs;
        let held = gen_corpus(&CorpusConfig::functional(1000), 7).unwrap().programs;
        let m = model(&train);
        let u = UniformDenoiser { vocab_size: vocab().len(), mask_id: mask_id() };
        let pm = perplexity(&m, &held, mask_id(), 1).unwrap();
        let pu = perplexity(&u, &held, mask_id(), 1).unwrap();
        assert!((pu - 40.0).abs() < 1e-6);
        assert!(pm < pu, "{pm} vs {pu}");
    }

    #[test]
    fn errors_and_round_trip() {
        assert!(train_denoiser(&[], 41, mask_id(), &DenoiserConfig::default()).is_err());
        let bad = DenoiserConfig { mix: [0.5, 0.5, 0.5], ..DenoiserConfig::default() };
        assert!(train_denoiser(&[lex("let a = 1 ;").unwrap()], 41, mask_id(), &bad).is_err());
        let m = model(&[lex("let a = 1 ;").unwrap()])
            .with_feedback_tables(&[lex("let b = 2 ;").unwrap()])
            .unwrap();
        assert_eq!(NgramDenoiser::from_json(&m.to_json().unwrap()).unwrap(), m);
    }
}
