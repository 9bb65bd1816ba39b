//! Seeded program generators for the functional and security corpora.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::interp::{run_tokens, FunctionalTask, N_FAMILIES};
use super::lexer::{lex, newline_id, vocab};
use super::parser::parse_strict;
use crate::diffusion::{trajectory_rng, TokenId};
use crate::error::{invalid, CdcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Functional,
    Security,
}

/// Which safety pieces a generated security program omits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vulnerability {
    None,
    MissingSanitizer,
    MissingGuard,
    MissingBoth,
}

impl Vulnerability {
    pub fn is_vulnerable(self) -> bool {
        self != Vulnerability::None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passes: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vulnerability: Option<Vulnerability>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub programs: Vec<Vec<TokenId>>,
    pub labels: Vec<Labels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    pub size: usize,
    /// Programs are padded with line breaks to exactly this length.
    pub len: usize,
    /// Probability that a functional program is generated to pass its family's predicate.
    pub pass_rate: f64,
    /// Probability that a security program omits at least one safety piece.
    pub vulnerability_rate: f64,
    pub threshold: i64,
    /// Probability of a line break after each statement.
    pub newline_rate: f64,
    /// Probability of an unrelated filler statement in a security program.
    pub filler_rate: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Functional,
            size: 1000,
            len: 24,
            pass_rate: 0.5,
            vulnerability_rate: 0.5,
            threshold: 10,
            newline_rate: 1.0,
            filler_rate: 0.3,
        }
    }
}

impl CorpusConfig {
    pub fn functional(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }

    pub fn security(size: usize, vulnerability_rate: f64) -> Self {
        Self {
            kind: CorpusKind::Security,
            size,
            len: 32,
            vulnerability_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("pass_rate", self.pass_rate),
            ("vulnerability_rate", self.vulnerability_rate),
            ("newline_rate", self.newline_rate),
            ("filler_rate", self.filler_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CdcError::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        let min_len = match self.kind {
            CorpusKind::Functional => 12,
            CorpusKind::Security => 28,
        };
        if self.len < min_len {
            return Err(CdcError::Config(format!(
                "length {} too short for {:?} programs (need {min_len})",
                self.len, self.kind
            )));
        }
        Ok(())
    }
}

const VARS: [&str; 4] = ["a", "b", "c", "d"];

fn digit(rng: &mut impl Rng) -> String {
    rng.gen_range(0..10).to_string()
}

fn operand(rng: &mut impl Rng, defined: &[&str]) -> String {
    if defined.is_empty() || rng.gen_bool(0.5) {
        digit(rng)
    } else {
        defined.choose(rng).unwrap().to_string()
    }
}

fn functional_statements(rng: &mut impl Rng) -> Vec<String> {
    let n = rng.gen_range(2..=3);
    let mut defined: Vec<&str> = Vec::new();
    let mut out = Vec::new();
    for i in 0..n {
        let op = *["+", "-", "*"].choose(rng).unwrap();
        let reassign = i > 0 && rng.gen_bool(0.25);
        let stmt = if reassign {
            let v = *defined.choose(rng).unwrap();
            format!("{v} = {v} {op} {} ;", digit(rng))
        } else {
            let v = VARS[defined.len()];
            let s = match rng.gen_range(0..3) {
                0 => format!("let {v} = {} ;", operand(rng, &defined)),
                1 => format!(
                    "let {v} = {} {op} {} ;",
                    operand(rng, &defined),
                    operand(rng, &defined)
                ),
                _ => {
                    let f = ["inc", "dbl"].choose(rng).unwrap();
                    format!("let {v} = {f} ( {} ) ;", operand(rng, &defined))
                }
            };
            defined.push(v);
            s
        };
        out.push(stmt);
    }
    out
}

fn security_statements(vuln: Vulnerability, filler: bool, rng: &mut impl Rng) -> Vec<String> {
    let (x, y) = ("x", "y");
    let sink = ["exec", "query"].choose(rng).unwrap();
    let sanitize = matches!(vuln, Vulnerability::None | Vulnerability::MissingGuard);
    let guard = matches!(vuln, Vulnerability::None | Vulnerability::MissingSanitizer);
    let arg = if sanitize { y } else { x };
    let mut out = vec![format!("let {x} = input ( ) ;")];
    if sanitize {
        out.push(format!("let {y} = escape ( {x} ) ;"));
    }
    if guard {
        out.push(format!("check ( {arg} ) ;"));
    }
    out.push(format!("{sink} ( {arg} ) ;"));
    if filler {
        let f = format!("let a = {} ;", digit(rng));
        let at = rng.gen_range(0..=out.len() - 1);
        out.insert(at, f);
    }
    out
}

fn assemble(stmts: &[String], len: usize, newline_rate: f64, rng: &mut impl Rng) -> Option<Vec<TokenId>> {
    let nl = newline_id();
    let mut tokens = Vec::new();
    for s in stmts {
        tokens.extend(lex(s).expect("generator emits valid lexemes"));
        if rng.gen_bool(newline_rate) {
            tokens.push(nl);
        }
    }
    if tokens.len() > len {
        return None;
    }
    tokens.resize(len, nl);
    Some(tokens)
}

/// Generates a strict-valid corpus. Deterministic given `seed`.
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = trajectory_rng(seed);
    let mut corpus = Corpus::default();
    while corpus.programs.len() < config.size {
        let (tokens, labels) = match config.kind {
            CorpusKind::Functional => {
                let family = rng.gen_range(0..N_FAMILIES);
                let want_pass = rng.gen_bool(config.pass_rate);
                let task = FunctionalTask {
                    family,
                    threshold: config.threshold,
                };
                let Some(tokens) = assemble(&functional_statements(&mut rng), config.len, config.newline_rate, &mut rng)
                else {
                    continue;
                };
                let result = run_tokens(&tokens, &[]).ok().and_then(|o| o.result);
                let Some(r) = result else { continue };
                if task.predicate(r) != want_pass {
                    continue;
                }
                let labels = Labels {
                    result: Some(r),
                    family: Some(family),
                    passes: Some(want_pass),
                    vulnerability: None,
                };
                (tokens, labels)
            }
            CorpusKind::Security => {
                let vuln = if rng.gen_bool(config.vulnerability_rate) {
                    *[
                        Vulnerability::MissingSanitizer,
                        Vulnerability::MissingGuard,
                        Vulnerability::MissingBoth,
                    ]
                    .choose(&mut rng)
                    .unwrap()
                } else {
                    Vulnerability::None
                };
                let filler = rng.gen_bool(config.filler_rate);
                let stmts = security_statements(vuln, filler, &mut rng);
                let Some(tokens) = assemble(&stmts, config.len, config.newline_rate, &mut rng) else {
                    continue;
                };
                let labels = Labels {
                    vulnerability: Some(vuln),
                    ..Labels::default()
                };
                (tokens, labels)
            }
        };
        debug_assert!(parse_strict(&tokens).is_ok());
        corpus.programs.push(tokens);
        corpus.labels.push(labels);
    }
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<String>,
    #[serde(default)]
    labels: Labels,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.programs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.programs.is_empty()
    }

    /// Checks every token is in the vocabulary and every program strict-parses.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.programs.len() {
            return Err(invalid("labels and programs differ in count"));
        }
        for (i, p) in self.programs.iter().enumerate() {
            if let Some(&bad) = p.iter().find(|&&t| t >= vocab().len() || t == vocab().mask_id()) {
                return Err(invalid(format!("program {i} has invalid token id {bad}")));
            }
            parse_strict(p).map_err(|e| invalid(format!("program {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let v = vocab();
        for (p, l) in self.programs.iter().zip(&self.labels) {
            let rec = Record {
                tokens: p.iter().map(|&t| v.token(t).to_string()).collect(),
                labels: l.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let v = vocab();
        let mut corpus = Corpus::default();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            let tokens = rec
                .tokens
                .iter()
                .map(|s| {
                    v.id(s)
                        .ok_or_else(|| invalid(format!("line {}: unknown token {s:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            corpus.programs.push(tokens);
            corpus.labels.push(rec.labels);
        }
        corpus.validate()?;
        Ok(corpus)
    }
}
