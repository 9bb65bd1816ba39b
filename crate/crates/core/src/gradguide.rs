//! Surrogate-gradient correction: saliency localization, KL-anchored
//! augmented-Lagrangian projection of the proposal (mode A) and
//! constraint-triggered remasking (mode B).

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::{CleanProposal, Context, TokenId, TokenState};
use crate::engine::{
    decode_argmax, CorrectionOutcome, DecodedCandidate, EditRegion, Intervention, InterventionKind,
    Operator, ViolationReport,
};
use crate::error::{invalid, CdcError, Result};
use crate::minilang::parser::{parse_tolerant_program, Stmt, StmtKind};
use crate::surrogate::{hard_embed, hinge, soft_embed, SoftEmbedding, SurrogateModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SatisfiesPolicy {
    /// Exact oracle when the candidate parses, surrogate threshold otherwise.
    #[default]
    ExactOrSurrogate,
    /// Exact oracle; an unparsable candidate is unsatisfied.
    ExactOnly,
    SurrogateOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradGuideConfig {
    pub k: usize,
    pub alpha_h: f64,
    pub alpha_c: f64,
    pub beta: f64,
    pub rho: f64,
    pub theta: f64,
    pub tau_alm: f64,
    /// `None` means `ceil(0.1 * L)`.
    pub m_star: Option<usize>,
    pub budget: usize,
    pub k_inner: usize,
    pub step_size: f64,
    pub eps: f64,
    pub lambda0: f64,
    pub mu0: f64,
    pub satisfies: SatisfiesPolicy,
    /// Freeze committed rows during mode A.
    pub freeze_committed: bool,
}

impl Default for GradGuideConfig {
    fn default() -> Self {
        Self {
            k: 4,
            alpha_h: 0.1,
            alpha_c: 0.1,
            beta: 100.0,
            rho: 2.0,
            theta: 0.9,
            tau_alm: 0.7,
            m_star: None,
            budget: 2,
            k_inner: 10,
            step_size: 0.5,
            eps: 1e-8,
            lambda0: 1.0,
            mu0: 1.0,
            satisfies: SatisfiesPolicy::default(),
            freeze_committed: true,
        }
    }
}

impl GradGuideConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CdcError::Config(format!("gradguide: {m}")));
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if !(self.alpha_h >= 0.0 && self.alpha_c >= 0.0 && self.beta >= 0.0) {
            return bad("alpha_h, alpha_c and beta must be >= 0");
        }
        if !(self.rho > 1.0) {
            return bad("rho must be > 1");
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad("theta must be in (0, 1)");
        }
        if !(self.step_size > 0.0 && self.eps > 0.0) {
            return bad("step_size and eps must be positive");
        }
        if !(self.lambda0 >= 0.0 && self.mu0 > 0.0) {
            return bad("lambda0 must be >= 0 and mu0 > 0");
        }
        Ok(())
    }

    pub fn m_star_for(&self, len: usize) -> usize {
        self.m_star.unwrap_or_else(|| (len as f64 * 0.1).ceil() as usize)
    }

    pub fn alm_params(&self) -> AlmParams {
        AlmParams {
            beta: self.beta,
            k_inner: self.k_inner,
            step_size: self.step_size,
            eps: self.eps,
        }
    }
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// `a_i = |g_i| + alpha_h H(row_i) + alpha_c (1 - max row_i)`.
pub fn saliency(proposal: &CleanProposal, grads: &SoftEmbedding, alpha_h: f64, alpha_c: f64) -> Result<Vec<f64>> {
    if grads.len != proposal.len() {
        return Err(invalid("gradient rows do not match proposal rows"));
    }
    Ok(proposal
        .rows()
        .enumerate()
        .map(|(i, row)| {
            let norm = grads.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let max = row.iter().copied().fold(0.0, f64::max);
            norm + alpha_h * entropy(row) + alpha_c * (1.0 - max)
        })
        .collect())
}

/// Indices of the `k` largest scores, ties to the lowest index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn collect_spans(stmts: &[Stmt], out: &mut Vec<(std::ops::Range<usize>, bool)>) {
    for s in stmts {
        out.push((s.span.clone(), matches!(s.kind, StmtKind::Opaque)));
        if let StmtKind::If { body, .. } = &s.kind {
            collect_spans(body, out);
        }
    }
}

/// Grows each position to its smallest enclosing statement. Positions outside
/// any parsed statement get a +-2 window; those positions are returned too.
pub fn expand(positions: &[usize], candidate: &DecodedCandidate) -> Result<(EditRegion, Vec<usize>)> {
    let len = candidate.tokens.len();
    if let Some(&p) = positions.iter().find(|&&p| p >= len) {
        return Err(invalid(format!("position {p} outside 0..{len}")));
    }
    let program = parse_tolerant_program(&candidate.tokens);
    let mut spans = Vec::new();
    collect_spans(&program.stmts, &mut spans);
    let mut out = Vec::new();
    let mut fallback = Vec::new();
    for &p in positions {
        let best = spans
            .iter()
            .filter(|(s, _)| s.contains(&p))
            .min_by_key(|(s, _)| s.len());
        match best {
            Some((s, false)) => out.extend(s.clone()),
            _ => {
                fallback.push(p);
                out.extend(p.saturating_sub(2)..(p + 3).min(len));
            }
        }
    }
    Ok((EditRegion::from_positions(out), fallback))
}

/// Differentiable penalty on a proposal; gradient is `L x |V|` w.r.t. `y`.
pub trait Penalty {
    fn eval(&self, y: &CleanProposal) -> Result<(f64, Vec<f64>)>;
}

/// `sum_j lambda_j dg_j(y) + mu_j / 2 dg_j(y)^2` under the surrogate.
pub struct SurrogatePenalty<'a> {
    pub model: &'a SurrogateModel,
    pub family: usize,
    pub lambda: &'a [f64],
    pub mu: &'a [f64],
}

impl Penalty for SurrogatePenalty<'_> {
    fn eval(&self, y: &CleanProposal) -> Result<(f64, Vec<f64>)> {
        let table = self.model.embedding();
        let emb = soft_embed(y, table)?;
        let (value, g) = self.model.penalty_grad(&emb, self.family, self.lambda, self.mu)?;
        let n = y.vocab_size();
        let mut grad = vec![0.0; y.len() * n];
        for i in 0..y.len() {
            let gi = g.row(i);
            for v in 0..n {
                grad[i * n + v] = table.row(v).iter().zip(gi).map(|(a, b)| a * b).sum();
            }
        }
        Ok((value, grad))
    }
}

/// `lambda * sum_i sum_v y_i(v) c_i(v)`.
pub struct LinearPenalty {
    pub cost: Vec<f64>,
    pub lambda: f64,
}

impl Penalty for LinearPenalty {
    fn eval(&self, y: &CleanProposal) -> Result<(f64, Vec<f64>)> {
        if self.cost.len() != y.as_flat().len() {
            return Err(invalid("cost matrix shape mismatch"));
        }
        let value = self.lambda * y.as_flat().iter().zip(&self.cost).map(|(a, b)| a * b).sum::<f64>();
        Ok((value, self.cost.iter().map(|c| self.lambda * c).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlmParams {
    pub beta: f64,
    pub k_inner: usize,
    pub step_size: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlmDiagnostics {
    pub objective_start: f64,
    pub objective_end: f64,
    pub accepted_steps: usize,
    pub halvings: usize,
}

struct AlmProblem<'a> {
    base: &'a CleanProposal,
    free: Vec<usize>,
    cols: Vec<usize>,
    log_q: Vec<f64>,
    weight: Vec<f64>,
    penalty: &'a dyn Penalty,
}

impl AlmProblem<'_> {
    fn n(&self) -> usize {
        self.cols.len()
    }

    /// Builds `y` from free-row logits; frozen rows keep the base row.
    fn proposal(&self, u: &[f64]) -> (CleanProposal, Vec<f64>) {
        let n = self.n();
        let mut y = self.base.clone();
        let mut log_y = vec![0.0; u.len()];
        for (r, &i) in self.free.iter().enumerate() {
            let ur = &u[r * n..(r + 1) * n];
            let max = ur.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + ur.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let row = y.row_mut(i);
            for (c, &v) in self.cols.iter().enumerate() {
                log_y[r * n + c] = ur[c] - lse;
                row[v] = log_y[r * n + c].exp();
            }
        }
        (y, log_y)
    }

    fn objective(&self, u: &[f64]) -> Result<(f64, CleanProposal, Vec<f64>)> {
        let n = self.n();
        let (y, log_y) = self.proposal(u);
        let mut kl = 0.0;
        for (r, &i) in self.free.iter().enumerate() {
            let row = y.row(i);
            let mut k = 0.0;
            for (c, &v) in self.cols.iter().enumerate() {
                k += row[v] * (log_y[r * n + c] - self.log_q[r * n + c]);
            }
            kl += self.weight[r] * k;
        }
        let (p, _) = self.penalty.eval(&y)?;
        Ok((kl + p, y, log_y))
    }

    /// Row-weight preconditioned gradient in logit space.
    fn direction(&self, y: &CleanProposal, log_y: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        let vs = y.vocab_size();
        let (_, gp) = self.penalty.eval(y)?;
        let mut dir = vec![0.0; self.free.len() * n];
        for (r, &i) in self.free.iter().enumerate() {
            let row = y.row(i);
            let w = self.weight[r];
            let dfdy: Vec<f64> = self
                .cols
                .iter()
                .enumerate()
                .map(|(c, &v)| w * (log_y[r * n + c] - self.log_q[r * n + c]) + gp[i * vs + v])
                .collect();
            let mean: f64 = self.cols.iter().zip(&dfdy).map(|(&v, d)| row[v] * d).sum();
            for (c, &v) in self.cols.iter().enumerate() {
                dir[r * n + c] = row[v] * (dfdy[c] - mean) / w;
            }
        }
        Ok(dir)
    }
}

/// Approximately minimizes `KL(y | x0) + penalty(y) + beta sum_{i not in S} KL(y_i | x0_i)`
/// over `y = softmax(u)`, starting from `u = log(x0 + eps)`.
///
/// Rows with `free[i] == false` are held at the base row. Rows whose logits
/// never move are returned bit-identical to the base.
pub fn alm_project(
    proposal: &CleanProposal,
    region: &EditRegion,
    params: &AlmParams,
    penalty: &dyn Penalty,
    mask_id: TokenId,
    free: Option<&[bool]>,
) -> Result<(CleanProposal, AlmDiagnostics)> {
    if !region.within(proposal.len()) {
        return Err(invalid("edit region outside the proposal"));
    }
    let free_rows: Vec<usize> = (0..proposal.len())
        .filter(|&i| free.is_none_or(|f| f[i]))
        .collect();
    let cols: Vec<usize> = (0..proposal.vocab_size()).filter(|&v| v != mask_id).collect();
    let n = cols.len();
    let mut u = Vec::with_capacity(free_rows.len() * n);
    for &i in &free_rows {
        let row = proposal.row(i);
        u.extend(cols.iter().map(|&v| (row[v] + params.eps).ln()));
    }
    let mut log_q = u.clone();
    for r in 0..free_rows.len() {
        let ur = &mut log_q[r * n..(r + 1) * n];
        let max = ur.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + ur.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        ur.iter_mut().for_each(|x| *x -= lse);
    }
    let weight = free_rows
        .iter()
        .map(|&i| if region.contains(i) { 1.0 } else { 1.0 + params.beta })
        .collect();
    let problem = AlmProblem {
        base: proposal,
        free: free_rows,
        cols,
        log_q,
        weight,
        penalty,
    };
    let u0 = u.clone();
    let numerical = |objective: f64, step: usize| CdcError::Numerical {
        message: "alm objective is not finite".into(),
        objective,
        inner_step: step,
    };
    let (mut f, mut y, mut log_y) = problem.objective(&u)?;
    if !f.is_finite() {
        return Err(numerical(f, 0));
    }
    let mut diag = AlmDiagnostics {
        objective_start: f,
        ..Default::default()
    };
    'outer: for step in 1..=params.k_inner {
        let dir = problem.direction(&y, &log_y)?;
        if dir.iter().all(|&d| d == 0.0) {
            break;
        }
        let mut s = params.step_size;
        for attempt in 0..=5 {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, d)| a - s * d).collect();
            let (ft, yt, lt) = problem.objective(&trial)?;
            if !ft.is_finite() {
                return Err(numerical(ft, step));
            }
            if ft <= f {
                u = trial;
                f = ft;
                y = yt;
                log_y = lt;
                diag.accepted_steps += 1;
                continue 'outer;
            }
            if attempt < 5 {
                s *= 0.5;
                diag.halvings += 1;
            }
        }
        break;
    }
    diag.objective_end = f;
    for (r, &i) in problem.free.iter().enumerate() {
        if u[r * n..(r + 1) * n] == u0[r * n..(r + 1) * n] {
            y.row_mut(i).copy_from_slice(proposal.row(i));
        }
    }
    Ok((y, diag))
}

/// Multipliers and penalties, one per constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmState {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    /// Starts at +inf so the first update never grows `mu`.
    pub dg_prev: Vec<f64>,
    pub rho: f64,
    pub theta: f64,
}

impl AlmState {
    pub fn new(m: usize, lambda0: f64, mu0: f64, rho: f64, theta: f64) -> Self {
        Self {
            lambda: vec![lambda0; m],
            mu: vec![mu0; m],
            dg_prev: vec![f64::INFINITY; m],
            rho,
            theta,
        }
    }
}

/// `lambda <- [lambda + mu dg]_+`; `mu <- rho mu` when a positive violation stalls.
pub fn update_multipliers(state: &AlmState, dg: &[f64]) -> AlmState {
    let mut next = state.clone();
    for j in 0..dg.len() {
        next.lambda[j] = (state.lambda[j] + state.mu[j] * dg[j]).max(0.0);
        if dg[j] > 0.0 && dg[j] >= state.theta * state.dg_prev[j] {
            next.mu[j] = state.rho * state.mu[j];
        }
        next.dg_prev[j] = dg[j];
    }
    next
}

/// True when mode A should run: some decoded score is below `tau_alm`.
pub fn gate_mode_a(model: &SurrogateModel, candidate: &DecodedCandidate, family: usize, tau_alm: f64) -> Result<bool> {
    let g = model.scores(&hard_embed(&candidate.tokens, model.embedding()), family)?;
    Ok(g.iter().any(|&s| s < tau_alm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeBState {
    pub m_star: usize,
    pub budget: usize,
    pub used: usize,
}

impl ModeBState {
    pub fn triggers(&self, xt: &TokenState, satisfied: bool) -> bool {
        xt.n_masked() <= self.m_star && self.used < self.budget && !satisfied
    }
}

/// Remasks `region` when the trigger holds; returns the remasked committed positions.
pub fn mode_b_step(
    xt: &TokenState,
    region: &EditRegion,
    cfg: &mut ModeBState,
    satisfied: bool,
) -> (TokenState, Vec<usize>) {
    if !cfg.triggers(xt, satisfied) {
        return (xt.clone(), Vec::new());
    }
    let mut out = xt.clone();
    let mut remasked = Vec::new();
    for p in region.positions().filter(|&p| p < xt.len()) {
        if out.tokens[p] != xt.mask_id {
            out.tokens[p] = xt.mask_id;
            remasked.push(p);
        }
    }
    cfg.used += 1;
    (out, remasked)
}

/// Exact constraint check on a mask-free candidate; `None` when not applicable.
pub type ExactOracle<'a> = &'a (dyn Fn(&[TokenId]) -> Option<bool> + Sync);

pub struct GradGuide<'a> {
    pub model: &'a SurrogateModel,
    pub config: GradGuideConfig,
    pub family: usize,
    pub oracle: Option<ExactOracle<'a>>,
    pub alm: AlmState,
    pub mode_b: ModeBState,
    /// `(lambda, mu)` after every update, for invariant checks.
    pub history: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<'a> GradGuide<'a> {
    pub fn new(
        model: &'a SurrogateModel,
        config: GradGuideConfig,
        family: usize,
        len: usize,
        oracle: Option<ExactOracle<'a>>,
    ) -> Result<Self> {
        config.validate()?;
        let m = model.constraints();
        Ok(Self {
            alm: AlmState::new(m, config.lambda0, config.mu0, config.rho, config.theta),
            mode_b: ModeBState {
                m_star: config.m_star_for(len),
                budget: config.budget,
                used: 0,
            },
            model,
            config,
            family,
            oracle,
            history: Vec::new(),
        })
    }

    fn satisfies(&self, candidate: &DecodedCandidate, g: &[f64]) -> bool {
        let surrogate = || g.iter().zip(self.model.thresholds()).all(|(g, t)| g >= t);
        let exact = self.oracle.and_then(|o| o(&candidate.tokens));
        match (self.config.satisfies, exact) {
            (SatisfiesPolicy::SurrogateOnly, _) => surrogate(),
            (_, Some(v)) => v,
            (SatisfiesPolicy::ExactOnly, None) => false,
            (SatisfiesPolicy::ExactOrSurrogate, None) => surrogate(),
        }
    }
}

impl Operator for GradGuide<'_> {
    fn name(&self) -> &str {
        "gradguide"
    }

    fn correct(
        &mut self,
        proposal: &CleanProposal,
        state: &TokenState,
        context: &Context,
        _t: usize,
    ) -> Result<CorrectionOutcome> {
        let mut out = CorrectionOutcome::identity(proposal, state, context);
        let mode_a_on = self.config.tau_alm > 0.0;
        let mode_b_possible = self.mode_b.used < self.mode_b.budget && state.n_masked() <= self.mode_b.m_star;
        if !mode_a_on && !mode_b_possible {
            return Ok(out);
        }
        let candidate = decode_argmax(proposal);
        let g_dec = self
            .model
            .scores(&hard_embed(&candidate.tokens, self.model.embedding()), self.family)?;
        let (dg_dec, _) = hinge(&g_dec, self.model.thresholds());
        out.report = ViolationReport {
            scores: dg_dec.clone(),
            feedback: json!({ "surrogate": g_dec }),
        };
        let emb = soft_embed(proposal, self.model.embedding())?;
        let grads = self.model.grad_wrt_embeddings(&emb, self.family)?;
        let sal = saliency(proposal, &grads, self.config.alpha_h, self.config.alpha_c)?;
        let picked = top_k(&sal, self.config.k);
        let (region, fallback) = expand(&picked, &candidate)?;
        out.region = region.clone();

        let mut kind = None;
        let mut detail = serde_json::Map::new();
        let mut rows_changed = 0;
        let mut retargeted = Vec::new();
        if mode_a_on && g_dec.iter().any(|&s| s < self.config.tau_alm) {
            let free: Vec<bool> = (0..state.len())
                .map(|i| !self.config.freeze_committed || state.is_masked(i))
                .collect();
            let penalty = SurrogatePenalty {
                model: self.model,
                family: self.family,
                lambda: &self.alm.lambda,
                mu: &self.alm.mu,
            };
            let (y, diag) = alm_project(
                proposal,
                &region,
                &self.config.alm_params(),
                &penalty,
                state.mask_id,
                Some(&free),
            )?;
            rows_changed = (0..y.len()).filter(|&i| y.row(i) != proposal.row(i)).count();
            let moved = decode_argmax(&y).tokens;
            retargeted = (0..y.len()).filter(|&i| moved[i] != candidate.tokens[i]).collect();
            detail.insert("alm".into(), serde_json::to_value(&diag)?);
            detail.insert("lambda".into(), json!(self.alm.lambda));
            detail.insert("mu".into(), json!(self.alm.mu));
            out.proposal = y;
            kind = Some(InterventionKind::ModeA);
        }
        if mode_a_on {
            self.alm = update_multipliers(&self.alm, &dg_dec);
            self.history.push((self.alm.lambda.clone(), self.alm.mu.clone()));
        }
        let satisfied = self.satisfies(&candidate, &g_dec);
        let (reopened, remasked) = mode_b_step(state, &region, &mut self.mode_b, satisfied);
        let fired_b = reopened != *state;
        if fired_b {
            out.refresh_rows = remasked.clone();
            out.state = reopened;
            kind = Some(match kind {
                Some(_) => InterventionKind::ModeAB,
                None => InterventionKind::ModeB,
            });
        }
        let Some(kind) = kind else {
            return Ok(out);
        };
        let mut notes = Vec::new();
        if !fallback.is_empty() {
            notes.push(format!("window fallback at positions {fallback:?}"));
        }
        detail.insert("budget_used".into(), json!(self.mode_b.used));
        out.intervention = Some(Intervention {
            kind,
            remasked,
            inserted: Vec::new(),
            message: None,
            before: state.tokens.clone(),
            after: out.state.tokens.clone(),
            rows_changed,
            retargeted,
            notes,
            detail: serde_json::Value::Object(detail),
        });
        Ok(out)
    }

    fn summary(&self) -> serde_json::Value {
        json!({
            "mode_b_used": self.mode_b.used,
            "lambda": self.alm.lambda,
            "mu": self.alm.mu,
            "history": self.history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::{lex, mask_id, vocab};

    fn rows(r: Vec<Vec<f64>>, mask: usize) -> CleanProposal {
        CleanProposal::from_rows(r, mask).unwrap()
    }

    fn zero_grads(len: usize) -> SoftEmbedding {
        SoftEmbedding { len, dim: 2, data: vec![0.0; len * 2] }
    }

    #[test]
    fn saliency_terms() {
        let p = rows(vec![vec![1.0 / 3.0; 3].into_iter().chain([0.0]).collect(), vec![0.0, 1.0, 0.0, 0.0]], 3);
        let a = saliency(&p, &zero_grads(2), 1.0, 0.0).unwrap();
        assert!((a[0] - 3f64.ln()).abs() < 1e-12 && a[1] == 0.0);
        let a = saliency(&p, &zero_grads(2), 0.0, 1.0).unwrap();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-12 && a[1] == 0.0);
        let mut g = zero_grads(5);
        g.data[6] = 1.0;
        let p = CleanProposal::one_hot(&[0, 1, 2, 0, 1], 4);
        assert_eq!(top_k(&saliency(&p, &g, 0.0, 0.0).unwrap(), 1), [3]);
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 0.0], 2), [1, 2]);
    }

    #[test]
    fn expand_statement_and_fallback() {
        let c = DecodedCandidate { tokens: lex("let a = 1 ; let b = a + 2 ;").unwrap() };
        let (r, fb) = expand(&[3], &c).unwrap();
        assert_eq!(r.spans(), [(0, 5)]);
        assert!(fb.is_empty());
        let (r, _) = expand(&[6, 8], &c).unwrap();
        assert_eq!(r.spans(), [(5, 12)]);
        let c = DecodedCandidate { tokens: lex("let a = 1 ; ) ) ) ) ) ) ;").unwrap() };
        let (r, fb) = expand(&[8], &c).unwrap();
        assert_eq!(r.spans(), [(6, 11)]);
        assert_eq!(fb, [8]);
        let (r, _) = expand(&[11], &c).unwrap();
        assert_eq!(r.spans(), [(9, 12)]);
    }

    #[test]
    fn zero_penalty_is_identity() {
        let p = rows(vec![vec![0.2, 0.5, 0.3, 0.0], vec![0.0, 0.0, 1.0, 0.0]], 3);
        let pen = LinearPenalty { cost: vec![0.0; 8], lambda: 0.0 };
        let params = AlmParams { beta: 100.0, k_inner: 10, step_size: 0.5, eps: 1e-8 };
        let (y, _) = alm_project(&p, &EditRegion::from_positions([0]), &params, &pen, 3, None).unwrap();
        assert_eq!(y, p);
    }

    #[test]
    fn linear_penalty_tilts() {
        let base = vec![0.5, 0.3, 0.2, 0.0];
        let cost = vec![1.0, 0.0, 0.5, 0.0];
        let p = rows(vec![base.clone()], 3);
        let pen = LinearPenalty { cost: cost.clone(), lambda: 2.0 };
        let params = AlmParams { beta: 0.0, k_inner: 500, step_size: 0.5, eps: 1e-12 };
        let (y, _) = alm_project(&p, &EditRegion::from_positions([0]), &params, &pen, 3, None).unwrap();
        let w: Vec<f64> = base.iter().zip(&cost).map(|(b, c)| b * (-2.0 * c).exp()).collect();
        let z: f64 = w.iter().sum();
        for v in 0..3 {
            assert!((y.row(0)[v] - w[v] / z).abs() < 1e-4, "{:?}", y.row(0));
        }
    }

    #[test]
    fn multipliers() {
        let s = AlmState { lambda: vec![0.5], mu: vec![2.0], dg_prev: vec![f64::INFINITY], rho: 2.0, theta: 0.9 };
        let n = update_multipliers(&s, &[0.1]);
        assert!((n.lambda[0] - 0.7).abs() < 1e-12 && n.mu[0] == 2.0);
        let n = update_multipliers(&s, &[0.0]);
        assert_eq!((n.lambda[0], n.mu[0]), (0.5, 2.0));
        let s = AlmState { lambda: vec![0.0], mu: vec![1.0], dg_prev: vec![0.3], rho: 2.0, theta: 0.9 };
        assert_eq!(update_multipliers(&s, &[0.3]).mu[0], 2.0);
    }

    #[test]
    fn mode_b_trigger() {
        let xt = TokenState::new(vec![0, 1, 2, 3, 5], 5, 1);
        let region = EditRegion::from_positions([2, 4]);
        let mut cfg = ModeBState { m_star: 1, budget: 2, used: 0 };
        let (x, _) = mode_b_step(&xt, &EditRegion::from_positions([2]), &mut cfg, false);
        assert_eq!(x.tokens, [0, 1, 5, 3, 5]);
        let mut cfg = ModeBState { m_star: 0, budget: 2, used: 0 };
        assert_eq!(mode_b_step(&xt, &region, &mut cfg, false).0, xt);
        let mut cfg = ModeBState { m_star: 3, budget: 2, used: 2 };
        assert_eq!(mode_b_step(&xt, &region, &mut cfg, false).0, xt);
        let mut cfg = ModeBState { m_star: 3, budget: 2, used: 0 };
        assert_eq!(mode_b_step(&xt, &region, &mut cfg, true).0, xt);
        let xt = TokenState::new(vec![0, 1, 2, 3, 4], 5, 1);
        let mut cfg = ModeBState { m_star: 0, budget: 1, used: 0 };
        let (x, rm) = mode_b_step(&xt, &region, &mut cfg, false);
        assert_eq!(x.tokens, [0, 1, 5, 3, 5]);
        assert_eq!((rm, cfg.used), (vec![2, 4], 1));
    }

    #[test]
    fn disabled_operator_is_identity() {
        let model = SurrogateModel::init(vocab().len(), &Default::default()).unwrap();
        let cfg = GradGuideConfig { tau_alm: 0.0, budget: 0, ..Default::default() };
        let mut op = GradGuide::new(&model, cfg, 0, 5, None).unwrap();
        let state = TokenState::new(lex("let a = 1 ;").unwrap(), mask_id(), 1);
        let p = CleanProposal::one_hot(&state.tokens, vocab().len());
        let ctx = Context::empty(mask_id());
        let out = op.correct(&p, &state, &ctx, 1).unwrap();
        assert!(out.is_identity_of(&p, &state, &ctx));
        assert!(out.intervention.is_none());
    }
}
