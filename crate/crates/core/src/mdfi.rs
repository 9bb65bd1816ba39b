//! Program-analysis-guided correction: checkpoint gating, witness detection,
//! budgeted localization, remask and mask insertion, and prompt-buffer feedback.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::{CleanProposal, Context, TokenId, TokenState};
use crate::engine::{
    decode_argmax, CorrectionOutcome, EditRegion, Insertion, Intervention, InterventionKind, Operator,
    ViolationReport,
};
use crate::error::{CdcError, Result};
use crate::minilang::graph::{NodeKind, Role, StatementKind};
use crate::minilang::{lex, parse_tolerant, FunctionRegistry, NodeId, ProgramGraph, SecurityClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessKind {
    Sub,
    Ins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    TaintedSink,
    MissingGuard,
    HoleArgument,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hint {
    pub rule: Rule,
    /// Recommended safe pattern as MiniLang source.
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub node: NodeId,
    pub kind: WitnessKind,
    pub hint: Hint,
    pub confidence: f64,
}

/// What the analyzer reads at a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisInput {
    /// Argmax of the clean proposal; committed rows are one-hot so they agree with `x_t`.
    #[default]
    Decoded,
    /// `x_t` itself, masks parsed as holes.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdfiConfig {
    /// `None` means `{ceil(T/2), ceil(T/4)}`.
    pub checkpoints: Option<BTreeSet<usize>>,
    pub rho_min: f64,
    pub budget: usize,
    pub k: usize,
    pub b_tok: usize,
    pub b_p: usize,
    pub depth: usize,
    pub analysis: AnalysisInput,
    pub registry: FunctionRegistry,
}

impl Default for MdfiConfig {
    fn default() -> Self {
        Self {
            checkpoints: None,
            rho_min: 0.5,
            budget: 2,
            k: 12,
            b_tok: 8,
            b_p: 24,
            depth: 16,
            analysis: AnalysisInput::default(),
            registry: FunctionRegistry::default(),
        }
    }
}

impl MdfiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho_min) {
            return Err(CdcError::Config("mdfi: rho_min must be in [0, 1)".into()));
        }
        if self.checkpoints.as_ref().is_some_and(|c| c.contains(&0)) {
            return Err(CdcError::Config("mdfi: checkpoints must be in 1..=T".into()));
        }
        self.registry.validate()
    }

    pub fn checkpoints_for(&self, steps: usize) -> BTreeSet<usize> {
        self.checkpoints
            .clone()
            .unwrap_or_else(|| [steps.div_ceil(2), steps.div_ceil(4)].into_iter().filter(|&t| t >= 1).collect())
    }
}

pub fn checkpoint_gate(
    t: usize,
    xt: &TokenState,
    checkpoints: &BTreeSet<usize>,
    rho_min: f64,
    budget: usize,
    fired: usize,
) -> bool {
    checkpoints.contains(&t) && xt.committed_fraction() >= rho_min && fired < budget
}

fn call_mark(g: &ProgramGraph, id: NodeId) -> Option<SecurityClass> {
    match g.node(id).kind {
        NodeKind::Call { .. } => g.node(id).mark,
        _ => None,
    }
}

fn callee(g: &ProgramGraph, id: NodeId) -> Option<&str> {
    match &g.node(id).kind {
        NodeKind::Call { callee } => callee.as_deref(),
        _ => None,
    }
}

fn def_of(g: &ProgramGraph, stmt: NodeId) -> Option<NodeId> {
    g.children(stmt).find(|&c| {
        matches!(
            g.node(c).kind,
            NodeKind::Identifier { role: Role::Def, .. }
        )
    })
}

fn sink_arg(g: &ProgramGraph, call: NodeId) -> Option<NodeId> {
    g.children(call).next()
}

fn ident_name(g: &ProgramGraph, id: NodeId) -> Option<&str> {
    match &g.node(id).kind {
        NodeKind::Identifier { name, .. } => Some(name),
        _ => None,
    }
}

fn escape_hint(g: &ProgramGraph, sink: NodeId) -> String {
    let arg = sink_arg(g, sink).and_then(|a| ident_name(g, a)).unwrap_or("x");
    format!("let y = escape ( {arg} ) ;")
}

/// Source-to-sink flows along def-use edges that do not pass a sanitizer.
/// One substitution witness per reachable sink.
pub fn detect_dataflow(g: &ProgramGraph, depth: usize) -> Vec<Witness> {
    // (node whose value is tainted, hops, path touches a hole)
    let mut queue: VecDeque<(NodeId, usize, bool)> = g
        .nodes
        .iter()
        .filter(|n| call_mark(g, n.id) == Some(SecurityClass::Source))
        .map(|n| (n.id, 0, false))
        .collect();
    let mut seen = BTreeSet::new();
    let mut hits: Vec<(NodeId, bool)> = Vec::new();
    while let Some((start, hops, hole)) = queue.pop_front() {
        if !seen.insert((start, hole)) {
            continue;
        }
        let stmt = g.node(start).stmt;
        let hole = hole || stmt.is_some_and(|s| g.subtree_has_hole(s));
        let mut cur = g.node(start).parent;
        while let Some(p) = cur {
            match call_mark(g, p) {
                Some(SecurityClass::Sanitizer) => break,
                Some(SecurityClass::Sink) => {
                    hits.push((p, hole));
                    break;
                }
                _ => {}
            }
            if matches!(g.node(p).kind, NodeKind::Statement(_)) {
                if hops < depth {
                    if let Some(d) = def_of(g, p) {
                        queue.extend(g.uses_of(d).map(|u| (u, hops + 1, hole)));
                    }
                }
                break;
            }
            cur = g.node(p).parent;
        }
    }
    let mut out: Vec<Witness> = Vec::new();
    for (sink, hole) in hits {
        let confidence = if hole { 0.5 } else { 1.0 };
        match out.iter_mut().find(|w| w.node == sink) {
            Some(w) => w.confidence = w.confidence.max(confidence),
            None => out.push(Witness {
                node: sink,
                kind: WitnessKind::Sub,
                hint: Hint {
                    rule: Rule::TaintedSink,
                    pattern: escape_hint(g, sink),
                },
                confidence,
            }),
        }
    }
    out.sort_by_key(|w| w.node);
    out
}

/// Sinks missing their guard (insertion) and sinks whose argument is a hole (substitution).
pub fn detect_structural(g: &ProgramGraph, registry: &FunctionRegistry) -> Vec<Witness> {
    let mut out = Vec::new();
    for n in &g.nodes {
        if call_mark(g, n.id) != Some(SecurityClass::Sink) {
            continue;
        }
        let Some(arg) = sink_arg(g, n.id) else { continue };
        match &g.node(arg).kind {
            NodeKind::Hole { .. } => out.push(Witness {
                node: n.id,
                kind: WitnessKind::Sub,
                hint: Hint {
                    rule: Rule::HoleArgument,
                    pattern: "escape".into(),
                },
                confidence: 0.5,
            }),
            NodeKind::Identifier { name, .. } if callee(g, n.id).is_some_and(|c| registry.requires_guard(c)) => {
                let Some(stmt) = n.stmt else { continue };
                let start = g.node(stmt).span.start;
                let guarded = g.statements().any(|s| {
                    s.kind == NodeKind::Statement(StatementKind::Guard)
                        && s.block == n.block
                        && s.span.end <= start
                        && g.children(s.id).any(|c| match &g.node(c).kind {
                            NodeKind::Identifier { name: m, .. } => m == name,
                            NodeKind::Hole { .. } => true,
                            _ => false,
                        })
                });
                if !guarded {
                    out.push(Witness {
                        node: n.id,
                        kind: WitnessKind::Ins,
                        hint: Hint {
                            rule: Rule::MissingGuard,
                            pattern: format!("check ( {name} ) ;"),
                        },
                        confidence: 0.8,
                    });
                }
            }
            _ => {}
        }
    }
    out
}

/// All witnesses on an annotated graph, dataflow first.
pub fn detect(g: &ProgramGraph, registry: &FunctionRegistry, depth: usize) -> Vec<Witness> {
    let mut w = detect_dataflow(g, depth);
    w.extend(detect_structural(g, registry));
    w
}

/// Witnesses on a token sequence, parsed tolerantly.
pub fn witness_scan(tokens: &[TokenId], registry: &FunctionRegistry, depth: usize) -> Vec<Witness> {
    let (_, mut g) = parse_tolerant(tokens);
    g.annotate(registry);
    detect(&g, registry, depth)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Localization {
    pub region: EditRegion,
    pub sub: EditRegion,
    /// Anchor statement span per kept insertion witness.
    pub ins: Vec<(usize, usize)>,
    /// Indices into the witness list, in acceptance order.
    pub kept: Vec<usize>,
}

/// Budgeted projection of witnesses onto whole statement spans.
///
/// Witnesses are visited by decreasing confidence, then by statement start.
/// A witness is kept only if its own statement fits the remaining budget; its
/// dataflow-adjacent def statements are then added one by one while they fit.
pub fn localize(witnesses: &[Witness], g: &ProgramGraph, b_tok: usize) -> Localization {
    let mut loc = Localization::default();
    if b_tok == 0 {
        return loc;
    }
    let stmt_of = |w: &Witness| g.node(w.node).stmt;
    let mut order: Vec<usize> = (0..witnesses.len()).filter(|&i| stmt_of(&witnesses[i]).is_some()).collect();
    order.sort_by(|&a, &b| {
        let (wa, wb) = (&witnesses[a], &witnesses[b]);
        wb.confidence
            .total_cmp(&wa.confidence)
            .then_with(|| g.node(stmt_of(wa).unwrap()).span.start.cmp(&g.node(stmt_of(wb).unwrap()).span.start))
            .then(a.cmp(&b))
    });
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let fits = |used: &BTreeSet<usize>, span: &std::ops::Range<usize>| {
        used.len() + span.clone().filter(|p| !used.contains(p)).count() <= b_tok
    };
    for i in order {
        let w = &witnesses[i];
        let stmt = stmt_of(w).unwrap();
        let span = g.node(stmt).span.clone();
        if !fits(&used, &span) {
            continue;
        }
        used.extend(span.clone());
        loc.kept.push(i);
        match w.kind {
            WitnessKind::Ins => loc.ins.push((span.start, span.end)),
            WitnessKind::Sub => {
                let mut sub: BTreeSet<usize> = span.collect();
                let defs: BTreeSet<NodeId> = g
                    .subtree(w.node)
                    .into_iter()
                    .flat_map(|u| g.reaching_defs(u).collect::<Vec<_>>())
                    .filter_map(|d| g.node(d).stmt)
                    .filter(|&s| s != stmt)
                    .collect();
                for s in defs {
                    let span = g.node(s).span.clone();
                    if fits(&used, &span) {
                        used.extend(span.clone());
                        sub.extend(span);
                    }
                }
                loc.sub = loc.sub.union(&EditRegion::from_positions(sub));
            }
        }
    }
    loc.region = EditRegion::from_positions(used);
    loc
}

#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub state: TokenState,
    /// Committed positions that were remasked, post-insertion coordinates.
    pub remasked: Vec<usize>,
    pub inserted: Vec<Insertion>,
    /// Pre-insertion index of every post-insertion position; `None` for inserted masks.
    pub origin: Vec<Option<usize>>,
    pub notes: Vec<String>,
}

/// Remasks `loc.sub` and splices `k` masks before each insertion anchor.
pub fn apply_interventions(xt: &TokenState, loc: &Localization, k: usize) -> Applied {
    let mut notes = Vec::new();
    let mut anchors = BTreeSet::new();
    for &(start, _) in &loc.ins {
        if start < xt.len() {
            anchors.insert(start);
        } else {
            notes.push(format!("insertion anchor {start} not found; skipped"));
        }
    }
    if k == 0 {
        anchors.clear();
    }
    let mut tokens = Vec::with_capacity(xt.len() + k * anchors.len());
    let mut origin = Vec::with_capacity(tokens.capacity());
    let mut remasked = Vec::new();
    let mut inserted = Vec::new();
    for (p, &tok) in xt.tokens.iter().enumerate() {
        if anchors.contains(&p) {
            inserted.push(Insertion { at: tokens.len(), count: k });
            tokens.extend(std::iter::repeat_n(xt.mask_id, k));
            origin.extend(std::iter::repeat_n(None, k));
        }
        if loc.sub.contains(p) && tok != xt.mask_id {
            remasked.push(tokens.len());
            tokens.push(xt.mask_id);
        } else {
            tokens.push(tok);
        }
        origin.push(Some(p));
    }
    Applied {
        state: TokenState::new(tokens, xt.mask_id, xt.timestep),
        remasked,
        inserted,
        origin,
        notes,
    }
}

/// Writes `message` into the buffer, truncated to its length; trailing slots are masked.
pub fn write_buffer(context: &Context, message: &[TokenId]) -> (Context, Option<String>) {
    if context.buffer.is_empty() {
        return (context.clone(), Some("buffer has no slots; message dropped".into()));
    }
    let mut c = context.clone();
    let n = message.len().min(c.buffer.len());
    c.buffer[..n].copy_from_slice(&message[..n]);
    c.buffer[n..].fill(c.mask_id);
    (c, None)
}

/// Hint patterns of the kept witnesses, lexed and concatenated.
pub fn hint_message(witnesses: &[Witness], kept: &[usize]) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for &i in kept {
        let p = &witnesses[i].hint.pattern;
        if seen.insert(p.clone()) {
            out.extend(lex(p)?);
        }
    }
    Ok(out)
}

pub struct Mdfi {
    pub config: MdfiConfig,
    pub checkpoints: BTreeSet<usize>,
    pub fired: usize,
    pub scans: usize,
}

impl Mdfi {
    pub fn new(config: MdfiConfig, steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            checkpoints: config.checkpoints_for(steps),
            config,
            fired: 0,
            scans: 0,
        })
    }
}

impl Operator for Mdfi {
    fn name(&self) -> &str {
        "mdfi"
    }

    fn correct(
        &mut self,
        proposal: &CleanProposal,
        state: &TokenState,
        context: &Context,
        t: usize,
    ) -> Result<CorrectionOutcome> {
        let mut out = CorrectionOutcome::identity(proposal, state, context);
        let cfg = &self.config;
        if !checkpoint_gate(t, state, &self.checkpoints, cfg.rho_min, cfg.budget, self.fired) {
            return Ok(out);
        }
        self.scans += 1;
        let tokens = match cfg.analysis {
            AnalysisInput::Decoded => decode_argmax(proposal).tokens,
            AnalysisInput::Partial => state.tokens.clone(),
        };
        let (_, mut g) = parse_tolerant(&tokens);
        g.annotate(&cfg.registry);
        let witnesses = detect(&g, &cfg.registry, cfg.depth);
        out.report = ViolationReport {
            scores: vec![witnesses.len() as f64],
            feedback: json!({ "witnesses": witnesses }),
        };
        if witnesses.is_empty() {
            return Ok(out);
        }
        let loc = localize(&witnesses, &g, cfg.b_tok);
        let applied = apply_interventions(state, &loc, cfg.k);
        if applied.remasked.is_empty() && applied.inserted.is_empty() {
            return Ok(out);
        }
        self.fired += 1;
        let message = hint_message(&witnesses, &loc.kept)?;
        let (ctx, note) = write_buffer(context, &message);
        let mut notes = applied.notes.clone();
        notes.extend(note);

        // Refreshed from (x_t*, c*) by the loop; spliced rows are placeholders.
        let vs = proposal.vocab_size();
        let placeholder = CleanProposal::one_hot(&vec![0; applied.state.len()], vs);
        let mut y = placeholder;
        for (i, o) in applied.origin.iter().enumerate() {
            if let Some(o) = o {
                y.row_mut(i).copy_from_slice(proposal.row(*o));
            }
        }
        let region = EditRegion::from_positions(
            applied
                .origin
                .iter()
                .enumerate()
                .filter(|(_, o)| o.is_none_or(|o| loc.region.contains(o)))
                .map(|(i, _)| i),
        );
        let kept: Vec<&Witness> = loc.kept.iter().map(|&i| &witnesses[i]).collect();
        out.intervention = Some(Intervention {
            kind: InterventionKind::Mdfi,
            remasked: applied.remasked,
            inserted: applied.inserted,
            message: Some(message),
            before: state.tokens.clone(),
            after: applied.state.tokens.clone(),
            rows_changed: 0,
            retargeted: Vec::new(),
            notes,
            detail: json!({ "witnesses": witnesses, "kept": kept, "fired": self.fired }),
        });
        out.refresh_rows = (0..applied.state.len()).collect();
        out.proposal = y;
        out.state = applied.state;
        out.context = ctx;
        out.region = region;
        Ok(out)
    }

    fn summary(&self) -> serde_json::Value {
        json!({ "fired": self.fired, "scans": self.scans })
    }
}
