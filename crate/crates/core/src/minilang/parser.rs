//! Strict and hole-tolerant recursive-descent parsers.
//!
//! Both parsers share one implementation. Masks are rewritten to placeholder
//! identifiers `__hole_<i>__` (where `i` is the token position) before parsing;
//! the tolerant mode additionally turns every unparsable statement into an
//! opaque hole-statement covering its tokens and resynchronizes at the next `;`.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::lexer::{class_of, vocab, Keyword, Punct, TokClass};
use crate::diffusion::TokenId;

pub type Span = Range<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Name {
    Var(String),
    Hole(usize),
}

impl Name {
    pub fn is_hole(&self) -> bool {
        matches!(self, Name::Hole(_))
    }
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Name::Var(s) => f.write_str(s),
            Name::Hole(i) => write!(f, "__hole_{i}__"),
        }
    }
}

/// Lexical class assigned to a hole from the surrounding grammar position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HoleClass {
    Identifier,
    Expression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Callee {
    Func(String),
    Hole(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExprKind {
    Int(i64),
    Var(Name),
    Call {
        callee: Callee,
        arg: Option<Box<Expr>>,
    },
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StmtKind {
    Let {
        target: Name,
        target_span: Span,
        value: Expr,
    },
    Assign {
        target: Name,
        target_span: Span,
        value: Expr,
    },
    Call(Expr),
    Guard {
        target: Name,
        target_span: Span,
    },
    If {
        cond: Expr,
        body: Vec<Stmt>,
    },
    /// Unparsable token run kept as an opaque hole-statement.
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stmt {
    pub kind: StmtKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hole {
    pub position: usize,
    pub class: HoleClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub stmts: Vec<Stmt>,
    /// Length of the token stream the program was parsed from.
    pub len: usize,
    pub holes: Vec<Hole>,
    /// Spans of statements the tolerant parser could not parse.
    pub degraded: Vec<Span>,
}

impl Program {
    pub fn has_holes(&self) -> bool {
        !self.holes.is_empty()
    }

    pub fn is_degraded(&self) -> bool {
        !self.degraded.is_empty()
    }

    /// Checks that every identifier is defined before it is used.
    pub fn check_scopes(&self) -> Result<(), ScopeError> {
        let mut scopes: Vec<HashSet<String>> = vec![HashSet::new()];
        check_block(&self.stmts, &mut scopes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse error at token {}: {}", self.position, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeError {
    pub name: String,
    pub position: usize,
}

impl fmt::Display for ScopeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} used before definition at token {}", self.name, self.position)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StrictError {
    Syntax(ParseError),
    Scope(ScopeError),
}

impl fmt::Display for StrictError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrictError::Syntax(e) => e.fmt(f),
            StrictError::Scope(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for StrictError {}

fn check_block(stmts: &[Stmt], scopes: &mut Vec<HashSet<String>>) -> Result<(), ScopeError> {
    fn defined(scopes: &[HashSet<String>], name: &Name) -> bool {
        match name {
            Name::Var(s) => scopes.iter().any(|sc| sc.contains(s)),
            Name::Hole(_) => true,
        }
    }
    fn check_expr(e: &Expr, scopes: &[HashSet<String>]) -> Result<(), ScopeError> {
        match &e.kind {
            ExprKind::Int(_) => Ok(()),
            ExprKind::Var(n) if defined(scopes, n) => Ok(()),
            ExprKind::Var(n) => Err(ScopeError {
                name: n.to_string(),
                position: e.span.start,
            }),
            ExprKind::Call { arg, .. } => arg.as_deref().map_or(Ok(()), |a| check_expr(a, scopes)),
            ExprKind::Binary { lhs, rhs, .. } => {
                check_expr(lhs, scopes)?;
                check_expr(rhs, scopes)
            }
        }
    }
    for stmt in stmts {
        match &stmt.kind {
            StmtKind::Let { target, value, .. } => {
                check_expr(value, scopes)?;
                if let Name::Var(s) = target {
                    scopes.last_mut().expect("scope stack").insert(s.clone());
                }
            }
            StmtKind::Assign {
                target,
                target_span,
                value,
            } => {
                check_expr(value, scopes)?;
                if !defined(scopes, target) {
                    return Err(ScopeError {
                        name: target.to_string(),
                        position: target_span.start,
                    });
                }
            }
            StmtKind::Guard { target, target_span } => {
                if !defined(scopes, target) {
                    return Err(ScopeError {
                        name: target.to_string(),
                        position: target_span.start,
                    });
                }
            }
            StmtKind::Call(e) => check_expr(e, scopes)?,
            StmtKind::If { cond, body } => {
                check_expr(cond, scopes)?;
                scopes.push(HashSet::new());
                let r = check_block(body, scopes);
                scopes.pop();
                r?;
            }
            StmtKind::Opaque => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LexKind {
    Tok(TokClass, TokenId),
    Hole(HoleClass),
}

#[derive(Debug, Clone, Copy)]
struct Lexeme {
    pos: usize,
    kind: LexKind,
}

/// Rewrites masks into holes, inferring each hole's lexical class from the
/// preceding committed token. Newlines are dropped.
fn rewrite(tokens: &[TokenId]) -> (Vec<Lexeme>, Vec<Hole>) {
    let mut out = Vec::with_capacity(tokens.len());
    let mut holes = Vec::new();
    let mut prev: Option<LexKind> = None;
    for (pos, &t) in tokens.iter().enumerate() {
        let kind = match class_of(t) {
            TokClass::Newline => continue,
            TokClass::Mask => {
                let class = match prev {
                    Some(LexKind::Tok(TokClass::Punct(p), _)) => match p {
                        Punct::Assign | Punct::Plus | Punct::Minus | Punct::Star => {
                            HoleClass::Expression
                        }
                        Punct::LParen => match out.len().checked_sub(2).map(|i: usize| out[i]) {
                            Some(Lexeme {
                                kind: LexKind::Tok(TokClass::Keyword(Keyword::Check), _),
                                ..
                            }) => HoleClass::Identifier,
                            _ => HoleClass::Expression,
                        },
                        _ => HoleClass::Identifier,
                    },
                    _ => HoleClass::Identifier,
                };
                holes.push(Hole {
                    position: pos,
                    class,
                });
                LexKind::Hole(class)
            }
            c => LexKind::Tok(c, t),
        };
        out.push(Lexeme { pos, kind });
        prev = Some(kind);
    }
    (out, holes)
}

struct Parser<'a> {
    lex: &'a [Lexeme],
    at: usize,
    tolerant: bool,
    degraded: Vec<Span>,
}

type PResult<T> = Result<T, ParseError>;

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<LexKind> {
        self.lex.get(self.at).map(|l| l.kind)
    }

    fn peek_at(&self, k: usize) -> Option<LexKind> {
        self.lex.get(self.at + k).map(|l| l.kind)
    }

    fn pos(&self) -> usize {
        self.lex.get(self.at).map_or_else(
            || self.lex.last().map_or(0, |l| l.pos + 1),
            |l| l.pos,
        )
    }

    fn last_end(&self) -> usize {
        self.lex[self.at - 1].pos + 1
    }

    fn err<T>(&self, message: impl Into<String>) -> PResult<T> {
        Err(ParseError {
            position: self.pos(),
            message: message.into(),
        })
    }

    fn is_punct(&self, p: Punct) -> bool {
        matches!(self.peek(), Some(LexKind::Tok(TokClass::Punct(q), _)) if q == p)
    }

    fn expect_punct(&mut self, p: Punct) -> PResult<()> {
        if self.is_punct(p) {
            self.at += 1;
            Ok(())
        } else {
            self.err(format!("expected {p:?}"))
        }
    }

    fn name(&mut self) -> PResult<(Name, Span)> {
        let pos = self.pos();
        match self.peek() {
            Some(LexKind::Tok(TokClass::Ident, t)) => {
                self.at += 1;
                Ok((Name::Var(vocab().token(t).to_string()), pos..pos + 1))
            }
            Some(LexKind::Hole(_)) => {
                self.at += 1;
                Ok((Name::Hole(pos), pos..pos + 1))
            }
            _ => self.err("expected identifier"),
        }
    }

    fn block(&mut self, in_block: bool) -> PResult<Vec<Stmt>> {
        let mut stmts = Vec::new();
        while let Some(kind) = self.peek() {
            if in_block && matches!(kind, LexKind::Tok(TokClass::Punct(Punct::RBrace), _)) {
                break;
            }
            let start_at = self.at;
            match self.stmt() {
                Ok(s) => stmts.push(s),
                Err(_) if self.tolerant => {
                    self.resync(start_at, in_block);
                    let span = self.lex[start_at].pos..self.last_end();
                    self.degraded.push(span.clone());
                    stmts.push(Stmt {
                        kind: StmtKind::Opaque,
                        span,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(stmts)
    }

    /// Skips to just past the next `;`, or up to a closing `}` inside a block.
    fn resync(&mut self, start_at: usize, in_block: bool) {
        while let Some(kind) = self.peek() {
            match kind {
                LexKind::Tok(TokClass::Punct(Punct::Semi), _) => {
                    self.at += 1;
                    break;
                }
                LexKind::Tok(TokClass::Punct(Punct::RBrace), _) if in_block => break,
                _ => self.at += 1,
            }
        }
        if self.at == start_at {
            self.at += 1;
        }
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        let start = self.pos();
        let kind = match self.peek() {
            Some(LexKind::Tok(TokClass::Keyword(Keyword::Let), _)) => {
                self.at += 1;
                let (target, target_span) = self.name()?;
                self.expect_punct(Punct::Assign)?;
                let value = self.expr()?;
                self.expect_punct(Punct::Semi)?;
                StmtKind::Let {
                    target,
                    target_span,
                    value,
                }
            }
            Some(LexKind::Tok(TokClass::Keyword(Keyword::If), _)) => {
                self.at += 1;
                self.expect_punct(Punct::LParen)?;
                let cond = self.expr()?;
                self.expect_punct(Punct::RParen)?;
                self.expect_punct(Punct::LBrace)?;
                let body = self.block(true)?;
                self.expect_punct(Punct::RBrace)?;
                StmtKind::If { cond, body }
            }
            Some(LexKind::Tok(TokClass::Keyword(Keyword::Check), _)) => {
                self.at += 1;
                self.expect_punct(Punct::LParen)?;
                let (target, target_span) = self.name()?;
                self.expect_punct(Punct::RParen)?;
                self.expect_punct(Punct::Semi)?;
                StmtKind::Guard {
                    target,
                    target_span,
                }
            }
            Some(LexKind::Tok(TokClass::Func, _)) => {
                let call = self.atom()?;
                self.expect_punct(Punct::Semi)?;
                StmtKind::Call(call)
            }
            Some(LexKind::Hole(_))
                if matches!(
                    self.peek_at(1),
                    Some(LexKind::Tok(TokClass::Punct(Punct::LParen), _))
                ) =>
            {
                let call = self.atom()?;
                self.expect_punct(Punct::Semi)?;
                StmtKind::Call(call)
            }
            Some(LexKind::Tok(TokClass::Ident, _)) | Some(LexKind::Hole(_)) => {
                let (target, target_span) = self.name()?;
                self.expect_punct(Punct::Assign)?;
                let value = self.expr()?;
                self.expect_punct(Punct::Semi)?;
                StmtKind::Assign {
                    target,
                    target_span,
                    value,
                }
            }
            _ => return self.err("expected statement"),
        };
        Ok(Stmt {
            kind,
            span: start..self.last_end(),
        })
    }

    fn expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Some(LexKind::Tok(TokClass::Punct(Punct::Plus), _)) => BinOp::Add,
                Some(LexKind::Tok(TokClass::Punct(Punct::Minus), _)) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.at += 1;
            let rhs = self.product()?;
            let span = lhs.span.start..rhs.span.end;
            lhs = Expr {
                kind: ExprKind::Binary {
                    op,
                    lhs: Box::new(lhs),
                    rhs: Box::new(rhs),
                },
                span,
            };
        }
    }

    fn product(&mut self) -> PResult<Expr> {
        let mut lhs = self.atom()?;
        while self.is_punct(Punct::Star) {
            self.at += 1;
            let rhs = self.atom()?;
            let span = lhs.span.start..rhs.span.end;
            lhs = Expr {
                kind: ExprKind::Binary {
                    op: BinOp::Mul,
                    lhs: Box::new(lhs),
                    rhs: Box::new(rhs),
                },
                span,
            };
        }
        Ok(lhs)
    }

    fn call_args(&mut self, callee: Callee, start: usize) -> PResult<Expr> {
        self.expect_punct(Punct::LParen)?;
        let arg = if self.is_punct(Punct::RParen) {
            None
        } else {
            Some(Box::new(self.expr()?))
        };
        self.expect_punct(Punct::RParen)?;
        Ok(Expr {
            kind: ExprKind::Call { callee, arg },
            span: start..self.last_end(),
        })
    }

    fn atom(&mut self) -> PResult<Expr> {
        let start = self.pos();
        match self.peek() {
            Some(LexKind::Tok(TokClass::Literal(v), _)) => {
                self.at += 1;
                Ok(Expr {
                    kind: ExprKind::Int(v),
                    span: start..start + 1,
                })
            }
            Some(LexKind::Tok(TokClass::Ident, t)) => {
                self.at += 1;
                Ok(Expr {
                    kind: ExprKind::Var(Name::Var(vocab().token(t).to_string())),
                    span: start..start + 1,
                })
            }
            Some(LexKind::Hole(_)) => {
                self.at += 1;
                if self.is_punct(Punct::LParen) {
                    self.call_args(Callee::Hole(start), start)
                } else {
                    Ok(Expr {
                        kind: ExprKind::Var(Name::Hole(start)),
                        span: start..start + 1,
                    })
                }
            }
            Some(LexKind::Tok(TokClass::Func, t)) => {
                self.at += 1;
                self.call_args(Callee::Func(vocab().token(t).to_string()), start)
            }
            Some(LexKind::Tok(TokClass::Punct(Punct::LParen), _)) => {
                self.at += 1;
                let inner = self.expr()?;
                self.expect_punct(Punct::RParen)?;
                Ok(Expr {
                    kind: inner.kind,
                    span: start..self.last_end(),
                })
            }
            _ => self.err("expected expression"),
        }
    }
}

fn run(tokens: &[TokenId], tolerant: bool) -> PResult<Program> {
    let (lex, holes) = rewrite(tokens);
    let mut p = Parser {
        lex: &lex,
        at: 0,
        tolerant,
        degraded: Vec::new(),
    };
    let stmts = p.block(false)?;
    Ok(Program {
        stmts,
        len: tokens.len(),
        holes,
        degraded: p.degraded,
    })
}

/// Syntax-only parse. Masks become holes; any syntax error fails the parse.
pub fn parse_program(tokens: &[TokenId]) -> Result<Program, ParseError> {
    run(tokens, false)
}

/// Full strict parse: syntax, no holes, and define-before-use scoping.
pub fn parse_strict(tokens: &[TokenId]) -> Result<Program, StrictError> {
    let program = parse_program(tokens).map_err(StrictError::Syntax)?;
    if let Some(h) = program.holes.first() {
        return Err(StrictError::Syntax(ParseError {
            position: h.position,
            message: "mask token in strict input".into(),
        }));
    }
    program.check_scopes().map_err(StrictError::Scope)?;
    Ok(program)
}

/// Tolerant parse that never fails; unparsable statements become opaque.
pub fn parse_tolerant_program(tokens: &[TokenId]) -> Program {
    run(tokens, true).expect("tolerant parsing does not fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::lexer::{lex, mask_id};

    fn toks(s: &str) -> Vec<TokenId> {
        lex(s).unwrap()
    }

    #[test]
    fn strict_parses_statement_forms() {
        let p = parse_strict(&toks(
            "let a = 1 ; a = a + 2 * 3 ; check ( a ) ; exec ( a ) ; if ( a ) { let b = inc ( a ) ; }",
        ))
        .unwrap();
        assert_eq!(p.stmts.len(), 5);
        assert_eq!(p.stmts[0].span, 0..5);
        match &p.stmts[1].kind {
            StmtKind::Assign { value, .. } => match &value.kind {
                ExprKind::Binary { op: BinOp::Add, rhs, .. } => {
                    assert!(matches!(rhs.kind, ExprKind::Binary { op: BinOp::Mul, .. }))
                }
                other => panic!("{other:?}"),
            },
            other => panic!("{other:?}"),
        }
        assert!(matches!(p.stmts[4].kind, StmtKind::If { ref body, .. } if body.len() == 1));
    }

    #[test]
    fn strict_rejects_use_before_def_and_syntax_errors() {
        assert!(matches!(
            parse_strict(&toks("let b = a + 1 ;")),
            Err(StrictError::Scope(_))
        ));
        assert!(parse_program(&toks("let b = a + 1 ;")).is_ok());
        assert!(matches!(parse_strict(&toks("let = 1 ;")), Err(StrictError::Syntax(_))));
        assert!(parse_strict(&toks("if ( 1 ) { let a = 1 ; } exec ( a ) ;")).is_err());
    }

    #[test]
    fn hole_in_binding_target() {
        let mut t = toks("let a = 1 ;");
        t[1] = mask_id();
        let p = parse_tolerant_program(&t);
        assert!(!p.is_degraded());
        assert_eq!(p.holes, vec![Hole { position: 1, class: HoleClass::Identifier }]);
        match &p.stmts[0].kind {
            StmtKind::Let { target, .. } => assert_eq!(target.to_string(), "__hole_1__"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_mask_is_one_opaque_statement() {
        let t = vec![mask_id(); 9];
        let p = parse_tolerant_program(&t);
        assert_eq!(p.stmts.len(), 1);
        assert_eq!(p.stmts[0].kind, StmtKind::Opaque);
        assert_eq!(p.stmts[0].span, 0..9);
    }

    #[test]
    fn tolerant_recovers_after_bad_statement() {
        let p = parse_tolerant_program(&toks("let a = ; exec ( a ) ; ) let b = 2 ;"));
        let kinds: Vec<bool> = p.stmts.iter().map(|s| s.kind == StmtKind::Opaque).collect();
        assert_eq!(kinds, [true, false, true]);
        assert_eq!(p.stmts[0].span, 0..4);
        assert_eq!(p.stmts[2].span, 9..15);
    }

    #[test]
    fn tolerant_equals_strict_on_valid_input() {
        let t = toks("let x = input ( ) ;\nlet y = escape ( x ) ;\ncheck ( y ) ;\nexec ( y ) ;");
        assert_eq!(parse_tolerant_program(&t), parse_strict(&t).unwrap());
    }

    #[test]
    fn hole_classes_follow_grammar_position() {
        let m = mask_id();
        let mut t = toks("let a = 1 + 2 ; check ( a ) ;");
        t[3] = m;
        t[5] = m;
        t[9] = m;
        let p = parse_tolerant_program(&t);
        let classes: Vec<HoleClass> = p.holes.iter().map(|h| h.class).collect();
        assert_eq!(
            classes,
            [HoleClass::Expression, HoleClass::Expression, HoleClass::Identifier]
        );
        assert!(!p.is_degraded());
    }
}
