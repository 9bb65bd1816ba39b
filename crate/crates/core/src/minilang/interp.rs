//! Small-step interpreter: the exact functional oracle for MiniLang programs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::parser::{parse_strict, BinOp, Callee, Expr, ExprKind, Name, Program, Stmt, StmtKind};
use crate::diffusion::TokenId;

pub const STEP_BOUND: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkCall {
    pub func: String,
    pub value: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Outputs {
    /// Top-level bindings after execution.
    pub env: Vec<(String, i64)>,
    pub sinks: Vec<SinkCall>,
    pub guards: Vec<i64>,
    /// Value written by the last top-level `let` or assignment.
    pub result: Option<i64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuntimeError {
    #[error("program contains holes and cannot run")]
    NotExecutable,
    #[error("undefined variable {0}")]
    Undefined(String),
    #[error("step bound {STEP_BOUND} exceeded")]
    Timeout,
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("program does not parse: {0}")]
    Parse(String),
}

struct Machine<'a> {
    scopes: Vec<HashMap<String, i64>>,
    inputs: &'a [i64],
    next_input: usize,
    out: Outputs,
}

impl Machine<'_> {
    fn tick(&mut self) -> Result<(), RuntimeError> {
        self.out.steps += 1;
        if self.out.steps > STEP_BOUND {
            Err(RuntimeError::Timeout)
        } else {
            Ok(())
        }
    }

    fn get(&self, name: &Name) -> Result<i64, RuntimeError> {
        let Name::Var(s) = name else {
            return Err(RuntimeError::NotExecutable);
        };
        self.scopes
            .iter()
            .rev()
            .find_map(|sc| sc.get(s).copied())
            .ok_or_else(|| RuntimeError::Undefined(s.clone()))
    }

    fn eval(&mut self, e: &Expr) -> Result<i64, RuntimeError> {
        self.tick()?;
        match &e.kind {
            ExprKind::Int(v) => Ok(*v),
            ExprKind::Var(n) => self.get(n),
            ExprKind::Binary { op, lhs, rhs } => {
                let (a, b) = (self.eval(lhs)?, self.eval(rhs)?);
                Ok(match op {
                    BinOp::Add => a.wrapping_add(b),
                    BinOp::Sub => a.wrapping_sub(b),
                    BinOp::Mul => a.wrapping_mul(b),
                })
            }
            ExprKind::Call { callee, arg } => {
                let Callee::Func(f) = callee else {
                    return Err(RuntimeError::NotExecutable);
                };
                let v = match arg {
                    Some(a) => Some(self.eval(a)?),
                    None => None,
                };
                let x = v.unwrap_or(0);
                match f.as_str() {
                    "input" => {
                        let r = self.inputs.get(self.next_input).copied().unwrap_or(0);
                        self.next_input += 1;
                        Ok(r)
                    }
                    "exec" | "query" => {
                        self.out.sinks.push(SinkCall {
                            func: f.clone(),
                            value: x,
                        });
                        Ok(0)
                    }
                    "escape" => Ok(x),
                    "inc" => Ok(x.wrapping_add(1)),
                    "dbl" => Ok(x.wrapping_mul(2)),
                    other => Err(RuntimeError::UnknownFunction(other.to_string())),
                }
            }
        }
    }

    fn set(&mut self, name: &Name, value: i64, is_let: bool) -> Result<(), RuntimeError> {
        let Name::Var(s) = name else {
            return Err(RuntimeError::NotExecutable);
        };
        if is_let {
            self.scopes.last_mut().expect("scope").insert(s.clone(), value);
            return Ok(());
        }
        match self.scopes.iter_mut().rev().find(|sc| sc.contains_key(s)) {
            Some(sc) => {
                sc.insert(s.clone(), value);
                Ok(())
            }
            None => Err(RuntimeError::Undefined(s.clone())),
        }
    }

    fn block(&mut self, stmts: &[Stmt], top: bool) -> Result<(), RuntimeError> {
        for s in stmts {
            self.tick()?;
            match &s.kind {
                StmtKind::Let { target, value, .. } | StmtKind::Assign { target, value, .. } => {
                    let v = self.eval(value)?;
                    self.set(target, v, matches!(s.kind, StmtKind::Let { .. }))?;
                    if top {
                        self.out.result = Some(v);
                    }
                }
                StmtKind::Call(e) => {
                    self.eval(e)?;
                }
                StmtKind::Guard { target, .. } => {
                    let v = self.get(target)?;
                    self.out.guards.push(v);
                }
                StmtKind::If { cond, body } => {
                    if self.eval(cond)? != 0 {
                        self.scopes.push(HashMap::new());
                        let r = self.block(body, false);
                        self.scopes.pop();
                        r?;
                    }
                }
                StmtKind::Opaque => return Err(RuntimeError::NotExecutable),
            }
        }
        Ok(())
    }
}

/// Runs a parsed program. `input()` reads `inputs` in order, then yields 0.
pub fn interpret(program: &Program, inputs: &[i64]) -> Result<Outputs, RuntimeError> {
    if program.has_holes() || program.is_degraded() {
        return Err(RuntimeError::NotExecutable);
    }
    let mut m = Machine {
        scopes: vec![HashMap::new()],
        inputs,
        next_input: 0,
        out: Outputs::default(),
    };
    m.block(&program.stmts, true)?;
    let mut env: Vec<(String, i64)> = m.scopes.remove(0).into_iter().collect();
    env.sort();
    m.out.env = env;
    Ok(m.out)
}

/// Strict parse followed by interpretation.
pub fn run_tokens(tokens: &[TokenId], inputs: &[i64]) -> Result<Outputs, RuntimeError> {
    if tokens.contains(&super::lexer::mask_id()) {
        return Err(RuntimeError::NotExecutable);
    }
    let program = parse_strict(tokens).map_err(|e| RuntimeError::Parse(e.to_string()))?;
    interpret(&program, inputs)
}

/// Interpreter-checkable task families. The family index doubles as the
/// surrogate's context id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionalTask {
    pub family: usize,
    pub threshold: i64,
}

pub const FAMILY_AT_LEAST: usize = 0;
pub const FAMILY_BELOW: usize = 1;
pub const N_FAMILIES: usize = 2;

impl FunctionalTask {
    pub fn predicate(&self, result: i64) -> bool {
        match self.family {
            FAMILY_AT_LEAST => result >= self.threshold,
            _ => result < self.threshold,
        }
    }

    /// Exact pass verdict: strict-valid, runs, and the result meets the predicate.
    pub fn passes(&self, tokens: &[TokenId]) -> bool {
        matches!(run_tokens(tokens, &[]), Ok(Outputs { result: Some(r), .. }) if self.predicate(r))
    }
}
