//! The constrained denoising loop: propose, decode, evaluate/localize, correct,
//! then take the reverse step from the corrected state.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    reverse_step, CleanProposal, Context, Denoiser, NoiseSchedule, TokenId, TokenState,
    ROW_SUM_TOLERANCE,
};
use crate::error::{invalid, CdcError, Result};

/// Per-row argmax of a proposal, ties to the lowest token index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedCandidate {
    pub tokens: Vec<TokenId>,
}

pub fn decode_argmax(proposal: &CleanProposal) -> DecodedCandidate {
    let tokens = proposal
        .rows()
        .map(|row| {
            let mut best = 0;
            for (v, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = v;
                }
            }
            best
        })
        .collect();
    DecodedCandidate { tokens }
}

/// Sorted token positions selected for correction.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "RegionRepr", try_from = "RegionRepr")]
pub struct EditRegion {
    positions: BTreeSet<usize>,
}

#[derive(Serialize, Deserialize)]
struct RegionRepr {
    positions: Vec<usize>,
    spans: Vec<(usize, usize)>,
}

impl From<EditRegion> for RegionRepr {
    fn from(r: EditRegion) -> Self {
        RegionRepr {
            spans: r.spans(),
            positions: r.positions.into_iter().collect(),
        }
    }
}

impl TryFrom<RegionRepr> for EditRegion {
    type Error = String;

    fn try_from(r: RegionRepr) -> std::result::Result<Self, String> {
        let region = EditRegion::from_positions(r.positions);
        if region.spans() != r.spans {
            return Err("spans do not match positions".into());
        }
        Ok(region)
    }
}

impl EditRegion {
    pub fn from_positions(positions: impl IntoIterator<Item = usize>) -> Self {
        Self {
            positions: positions.into_iter().collect(),
        }
    }

    /// Union of half-open spans.
    pub fn from_spans<'a>(spans: impl IntoIterator<Item = &'a std::ops::Range<usize>>) -> Self {
        Self::from_positions(spans.into_iter().flat_map(|s| s.clone()))
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.positions.iter().copied()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.positions.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn union(&self, other: &EditRegion) -> EditRegion {
        Self::from_positions(self.positions.union(&other.positions).copied())
    }

    /// Maximal contiguous runs as half-open `(start, end)` pairs.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &p in &self.positions {
            match out.last_mut() {
                Some((_, end)) if *end == p => *end = p + 1,
                _ => out.push((p, p + 1)),
            }
        }
        out
    }

    pub fn within(&self, len: usize) -> bool {
        self.positions.last().is_none_or(|&p| p < len)
    }
}

/// Evaluator output: nonnegative scores plus a structured payload.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationReport {
    pub scores: Vec<f64>,
    #[serde(default)]
    pub feedback: serde_json::Value,
}

impl ViolationReport {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    ModeA,
    ModeB,
    ModeAB,
    Mdfi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insertion {
    /// Index of the first inserted mask in post-intervention coordinates.
    pub at: usize,
    pub count: usize,
}

/// What a firing operator did, with enough detail to recompute edit metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub kind: InterventionKind,
    /// Committed positions set back to mask (post-intervention coordinates).
    pub remasked: Vec<usize>,
    pub inserted: Vec<Insertion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<Vec<TokenId>>,
    pub before: Vec<TokenId>,
    pub after: Vec<TokenId>,
    /// Proposal rows the operator changed in place.
    #[serde(default)]
    pub rows_changed: usize,
    /// Positions whose decoded token the in-place change moved.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retargeted: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default)]
    pub detail: serde_json::Value,
}

impl Intervention {
    /// Edited positions in post-intervention coordinates, ascending.
    pub fn edited_positions(&self) -> Vec<usize> {
        let mut out: std::collections::BTreeSet<usize> =
            self.remasked.iter().chain(&self.retargeted).copied().collect();
        for ins in &self.inserted {
            out.extend(ins.at..ins.at + ins.count);
        }
        out.into_iter().collect()
    }

    pub fn edited(&self) -> usize {
        self.edited_positions().len()
    }

    pub fn edits_state(&self) -> bool {
        self.edited() > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutcome {
    pub proposal: CleanProposal,
    pub state: TokenState,
    pub context: Context,
    pub region: EditRegion,
    pub report: ViolationReport,
    /// Rows the loop must re-predict from the returned state and context before sampling.
    pub refresh_rows: Vec<usize>,
    pub intervention: Option<Intervention>,
}

impl CorrectionOutcome {
    pub fn identity(proposal: &CleanProposal, state: &TokenState, context: &Context) -> Self {
        Self {
            proposal: proposal.clone(),
            state: state.clone(),
            context: context.clone(),
            region: EditRegion::default(),
            report: ViolationReport::default(),
            refresh_rows: Vec::new(),
            intervention: None,
        }
    }

    pub fn is_identity_of(&self, proposal: &CleanProposal, state: &TokenState, context: &Context) -> bool {
        self.proposal == *proposal && self.state == *state && self.context == *context
    }
}

/// A correction operator `P_C`. Operator state is trajectory-local.
pub trait Operator {
    fn name(&self) -> &str;

    fn correct(
        &mut self,
        proposal: &CleanProposal,
        state: &TokenState,
        context: &Context,
        t: usize,
    ) -> Result<CorrectionOutcome>;

    /// Operator-specific end-of-run summary for the trace.
    fn summary(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityOperator;

impl Operator for IdentityOperator {
    fn name(&self) -> &str {
        "none"
    }

    fn correct(
        &mut self,
        proposal: &CleanProposal,
        state: &TokenState,
        context: &Context,
        _t: usize,
    ) -> Result<CorrectionOutcome> {
        Ok(CorrectionOutcome::identity(proposal, state, context))
    }
}

/// The reverse kernel with the corrected proposal in place of the denoiser's.
pub fn constrained_reverse_step(
    xt: &TokenState,
    y: &CleanProposal,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TokenState> {
    reverse_step(xt, y, schedule, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Masks in `x_t` before correction.
    pub n_masked: usize,
    pub len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fired: Option<InterventionKind>,
    pub region: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
    pub edited: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<Intervention>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryTrace {
    pub operator: String,
    pub initial_len: usize,
    pub steps: Vec<StepRecord>,
    pub final_tokens: Vec<TokenId>,
    #[serde(default)]
    pub verdicts: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub operator_summary: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceLine {
    Step(StepRecord),
    Final {
        operator: String,
        initial_len: usize,
        tokens: Vec<TokenId>,
        verdicts: serde_json::Map<String, serde_json::Value>,
        operator_summary: serde_json::Value,
    },
}

impl TrajectoryTrace {
    pub fn interventions(&self) -> impl Iterator<Item = &Intervention> {
        self.steps.iter().filter_map(|s| s.intervention.as_ref())
    }

    pub fn corrections(&self) -> impl Iterator<Item = &Intervention> {
        self.interventions().filter(|i| i.edits_state())
    }

    pub fn total_edited(&self) -> usize {
        self.steps.iter().map(|s| s.edited).sum()
    }

    pub fn total_inserted(&self) -> usize {
        self.interventions()
            .flat_map(|i| &i.inserted)
            .map(|i| i.count)
            .sum()
    }

    /// One JSON object per reverse step, then a closing `final` record.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, &TraceLine::Step(s.clone()))?;
            out.write_all(b"\n")?;
        }
        let fin = TraceLine::Final {
            operator: self.operator.clone(),
            initial_len: self.initial_len,
            tokens: self.final_tokens.clone(),
            verdicts: self.verdicts.clone(),
            operator_summary: self.operator_summary.clone(),
        };
        serde_json::to_writer(&mut out, &fin)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_jsonl(input: impl std::io::BufRead) -> Result<Self> {
        let mut trace = TrajectoryTrace::default();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                TraceLine::Step(s) => trace.steps.push(s),
                TraceLine::Final {
                    operator,
                    initial_len,
                    tokens,
                    verdicts,
                    operator_summary,
                } => {
                    trace.operator = operator;
                    trace.initial_len = initial_len;
                    trace.final_tokens = tokens;
                    trace.verdicts = verdicts;
                    trace.operator_summary = operator_summary;
                }
            }
        }
        Ok(trace)
    }
}

fn check_outcome(outcome: &CorrectionOutcome, mask_id: TokenId) -> Result<()> {
    if outcome.proposal.len() != outcome.state.len() {
        return Err(invalid(format!(
            "corrected proposal has {} rows for a state of length {}",
            outcome.proposal.len(),
            outcome.state.len()
        )));
    }
    if let Some(&r) = outcome.refresh_rows.iter().find(|&&r| r >= outcome.state.len()) {
        return Err(invalid(format!("refresh row {r} out of range")));
    }
    if !outcome.region.within(outcome.state.len()) {
        return Err(invalid("edit region outside the state"));
    }
    if outcome.report.scores.iter().any(|&s| !(s >= 0.0)) {
        return Err(invalid("violation scores must be nonnegative"));
    }
    for (i, row) in outcome.proposal.rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row[mask_id] != 0.0 {
            return Err(invalid(format!("corrected proposal row {i} is not a clean distribution")));
        }
    }
    Ok(())
}

/// Runs the constrained chain for `t = T..1`. Exactly `T` reverse steps are taken.
pub fn run_constrained(
    denoiser: &dyn Denoiser,
    operator: &mut dyn Operator,
    context: &Context,
    len: usize,
    mask_id: TokenId,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(TokenState, TrajectoryTrace)> {
    if len == 0 {
        return Err(invalid("sequence length must be >= 1"));
    }
    let mut state = TokenState::all_masked(len, mask_id, schedule.steps());
    let mut ctx = context.clone();
    let mut trace = TrajectoryTrace {
        operator: operator.name().to_string(),
        initial_len: len,
        ..Default::default()
    };
    for t in (1..=schedule.steps()).rev() {
        let tag = |e: CdcError| CdcError::Step {
            t,
            source: Box::new(e),
        };
        let proposal = denoiser.predict(&state, &ctx).map_err(tag)?;
        let n_masked = state.n_masked();
        let mut outcome = operator
            .correct(&proposal, &state, &ctx, t)
            .map_err(tag)?;
        check_outcome(&outcome, mask_id).map_err(tag)?;
        if !outcome.refresh_rows.is_empty() {
            let fresh = denoiser
                .predict(&outcome.state, &outcome.context)
                .map_err(tag)?;
            for &r in &outcome.refresh_rows {
                outcome.proposal.row_mut(r).copy_from_slice(fresh.row(r));
            }
        }
        let mut xt = outcome.state;
        xt.timestep = t;
        state = constrained_reverse_step(&xt, &outcome.proposal, schedule, rng).map_err(tag)?;
        ctx = outcome.context;
        let edited = outcome.intervention.as_ref().map_or(0, Intervention::edited);
        trace.steps.push(StepRecord {
            t,
            n_masked,
            len: xt.len(),
            fired: outcome.intervention.as_ref().map(|i| i.kind),
            region: outcome.region.spans(),
            scores: outcome.report.scores,
            edited,
            intervention: outcome.intervention,
        });
    }
    trace.final_tokens = state.tokens.clone();
    trace.operator_summary = operator.summary();
    Ok((state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UniformDenoiser;
    use crate::diffusion::{sample_vanilla, trajectory_rng, ScheduleKind};

    #[test]
    fn argmax_ties_to_lowest() {
        let p = CleanProposal::from_rows(vec![vec![0.1, 0.7, 0.2, 0.0], vec![0.5, 0.5, 0.0, 0.0]], 3).unwrap();
        assert_eq!(decode_argmax(&p).tokens, [1, 0]);
        let oh = CleanProposal::one_hot(&[2, 0, 1], 4);
        assert_eq!(decode_argmax(&oh).tokens, [2, 0, 1]);
    }

    #[test]
    fn region_spans() {
        let r = EditRegion::from_positions([5, 1, 2, 3, 7, 8]);
        assert_eq!(r.spans(), [(1, 4), (5, 6), (7, 9)]);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EditRegion>(&json).unwrap(), r);
        assert!(serde_json::from_str::<EditRegion>(r#"{"positions":[1],"spans":[]}"#).is_err());
    }

    #[test]
    fn identity_operator_matches_vanilla() {
        let d = UniformDenoiser { vocab_size: 5, mask_id: 4 };
        let s = NoiseSchedule::new(6, ScheduleKind::Linear).unwrap();
        let ctx = Context::empty(4);
        for seed in 0..20 {
            let v = sample_vanilla(&d, &ctx, 7, 4, &s, &mut trajectory_rng(seed)).unwrap();
            let (c, trace) =
                run_constrained(&d, &mut IdentityOperator, &ctx, 7, 4, &s, &mut trajectory_rng(seed)).unwrap();
            assert_eq!(v, c);
            assert_eq!(trace.steps.len(), 6);
            assert_eq!(trace.total_edited(), 0);
        }
    }

    struct RemaskAt {
        t: usize,
        pos: usize,
    }

    impl Operator for RemaskAt {
        fn name(&self) -> &str {
            "remask"
        }

        fn correct(
            &mut self,
            proposal: &CleanProposal,
            state: &TokenState,
            context: &Context,
            t: usize,
        ) -> Result<CorrectionOutcome> {
            let mut out = CorrectionOutcome::identity(proposal, state, context);
            if t == self.t {
                let before = state.tokens.clone();
                out.state.tokens[self.pos] = state.mask_id;
                out.refresh_rows = vec![self.pos];
                out.region = EditRegion::from_positions([self.pos]);
                out.intervention = Some(Intervention {
                    kind: InterventionKind::ModeB,
                    remasked: vec![self.pos],
                    inserted: vec![],
                    message: None,
                    before,
                    after: out.state.tokens.clone(),
                    rows_changed: 0,
                    retargeted: Vec::new(),
                    notes: vec![],
                    detail: serde_json::Value::Null,
                });
            }
            Ok(out)
        }
    }

    /// Commits everything at step 2, so the remask at t = 1 (gamma = 0) must refill position 1.
    #[test]
    fn remasked_position_is_refilled() {
        let d = UniformDenoiser { vocab_size: 4, mask_id: 3 };
        let s = NoiseSchedule::new(2, ScheduleKind::Linear).unwrap();
        let ctx = Context::empty(3);
        let mut refilled_differently = 0;
        for seed in 0..200 {
            let vanilla = sample_vanilla(&d, &ctx, 3, 3, &s, &mut trajectory_rng(seed)).unwrap();
            let mut op = RemaskAt { t: 1, pos: 1 };
            let (out, trace) = run_constrained(&d, &mut op, &ctx, 3, 3, &s, &mut trajectory_rng(seed)).unwrap();
            assert_eq!(out.n_masked(), 0);
            let before = &trace.steps[1].intervention.as_ref().unwrap().before;
            if !before.contains(&3) {
                assert_eq!(out.tokens[0], before[0]);
                assert_eq!(out.tokens[2], before[2]);
                refilled_differently += (out.tokens[1] != before[1]) as usize;
            }
            assert_eq!(trace.total_edited(), 1);
            let _ = vanilla;
        }
        assert!(refilled_differently > 0);
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let d = UniformDenoiser { vocab_size: 4, mask_id: 3 };
        let s = NoiseSchedule::new(3, ScheduleKind::Linear).unwrap();
        let mut op = RemaskAt { t: 1, pos: 0 };
        let (_, trace) = run_constrained(&d, &mut op, &Context::empty(3), 4, 3, &s, &mut trajectory_rng(1)).unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 4);
        assert_eq!(TrajectoryTrace::read_jsonl(&buf[..]).unwrap(), trace);
    }
}
