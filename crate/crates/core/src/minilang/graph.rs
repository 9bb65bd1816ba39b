//! Partial program graph: AST, statement-level control flow, and def-use dataflow,
//! with a token-span map for every node.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::parser::{
    parse_tolerant_program, BinOp, Callee, Expr, ExprKind, HoleClass, Name, Program, Span, Stmt,
    StmtKind,
};
use super::registry::{FunctionRegistry, SecurityClass};
use crate::diffusion::TokenId;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatementKind {
    Let,
    Assign,
    Call,
    Guard,
    If,
    Opaque,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Def,
    Use,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Program,
    Statement(StatementKind),
    Binary(BinOp),
    Literal(i64),
    Identifier { name: String, role: Role },
    /// `callee` is `None` when the callee is a hole.
    Call { callee: Option<String> },
    Hole { name: String, role: Role, class: HoleClass },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub span: Span,
    pub parent: Option<NodeId>,
    /// Innermost enclosing statement (the node itself for statements).
    pub stmt: Option<NodeId>,
    pub block: usize,
    pub mark: Option<SecurityClass>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProgramGraph {
    pub nodes: Vec<Node>,
    pub ast: Vec<(NodeId, NodeId)>,
    pub cfg: Vec<(NodeId, NodeId)>,
    pub dfg: Vec<(NodeId, NodeId)>,
    pub len: usize,
}

impl ProgramGraph {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.ast.iter().filter(move |(p, _)| *p == id).map(|&(_, c)| c)
    }

    pub fn statements(&self) -> impl Iterator<Item = &Node> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Statement(_)))
    }

    /// Smallest enclosing statement of `id`. For statements nested in an `if`
    /// this is the nested statement itself.
    pub fn enclosing_statement(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].stmt
    }

    pub fn reaching_defs(&self, use_id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.dfg.iter().filter(move |(_, u)| *u == use_id).map(|&(d, _)| d)
    }

    pub fn uses_of(&self, def_id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.dfg.iter().filter(move |(d, _)| *d == def_id).map(|&(_, u)| u)
    }

    /// Every node in the subtree rooted at `id`, including `id`.
    pub fn subtree(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = vec![id];
        let mut i = 0;
        while i < out.len() {
            let cur = out[i];
            out.extend(self.children(cur));
            i += 1;
        }
        out
    }

    pub fn subtree_has_hole(&self, id: NodeId) -> bool {
        self.subtree(id).into_iter().any(|n| {
            matches!(
                self.nodes[n].kind,
                NodeKind::Hole { .. } | NodeKind::Call { callee: None }
            )
        })
    }

    /// Marks every call node whose callee is in the registry with its class.
    pub fn annotate(&mut self, registry: &FunctionRegistry) {
        for node in &mut self.nodes {
            node.mark = match &node.kind {
                NodeKind::Call {
                    callee: Some(name),
                } => registry.class_of(name),
                _ => None,
            };
        }
    }
}

struct Builder {
    graph: ProgramGraph,
    scopes: Vec<HashMap<String, BTreeSet<NodeId>>>,
    next_block: usize,
}

impl Builder {
    fn add(
        &mut self,
        kind: NodeKind,
        span: Span,
        parent: Option<NodeId>,
        stmt: Option<NodeId>,
        block: usize,
    ) -> NodeId {
        let id = self.graph.nodes.len();
        let stmt = if matches!(kind, NodeKind::Statement(_)) {
            Some(id)
        } else {
            stmt
        };
        self.graph.nodes.push(Node {
            id,
            kind,
            span,
            parent,
            stmt,
            block,
            mark: None,
        });
        if let Some(p) = parent {
            self.graph.ast.push((p, id));
        }
        id
    }

    fn lookup(&self, name: &str) -> Option<&BTreeSet<NodeId>> {
        self.scopes.iter().rev().find_map(|s| s.get(name))
    }

    fn use_name(&mut self, name: &Name, span: Span, parent: NodeId, stmt: NodeId, block: usize) {
        match name {
            Name::Var(s) => {
                let id = self.add(
                    NodeKind::Identifier {
                        name: s.clone(),
                        role: Role::Use,
                    },
                    span,
                    Some(parent),
                    Some(stmt),
                    block,
                );
                if let Some(defs) = self.lookup(s).cloned() {
                    self.graph.dfg.extend(defs.into_iter().map(|d| (d, id)));
                }
            }
            Name::Hole(_) => {
                self.add(
                    NodeKind::Hole {
                        name: name.to_string(),
                        role: Role::Use,
                        class: HoleClass::Identifier,
                    },
                    span,
                    Some(parent),
                    Some(stmt),
                    block,
                );
            }
        }
    }

    fn def_name(&mut self, name: &Name, span: Span, parent: NodeId, block: usize, is_let: bool) {
        let kind = match name {
            Name::Var(s) => NodeKind::Identifier {
                name: s.clone(),
                role: Role::Def,
            },
            Name::Hole(_) => NodeKind::Hole {
                name: name.to_string(),
                role: Role::Def,
                class: HoleClass::Identifier,
            },
        };
        let id = self.add(kind, span, Some(parent), Some(parent), block);
        if let Name::Var(s) = name {
            let fresh = BTreeSet::from([id]);
            if is_let {
                self.scopes
                    .last_mut()
                    .expect("scope")
                    .insert(s.clone(), fresh);
            } else if let Some(scope) = self.scopes.iter_mut().rev().find(|sc| sc.contains_key(s)) {
                scope.insert(s.clone(), fresh);
            } else {
                self.scopes.last_mut().expect("scope").insert(s.clone(), fresh);
            }
        }
    }

    fn expr(&mut self, e: &Expr, parent: NodeId, stmt: NodeId, block: usize, holes: &[(usize, HoleClass)]) {
        match &e.kind {
            ExprKind::Int(v) => {
                self.add(NodeKind::Literal(*v), e.span.clone(), Some(parent), Some(stmt), block);
            }
            ExprKind::Var(Name::Hole(pos)) => {
                let class = holes
                    .iter()
                    .find(|(p, _)| p == pos)
                    .map_or(HoleClass::Identifier, |&(_, c)| c);
                self.add(
                    NodeKind::Hole {
                        name: Name::Hole(*pos).to_string(),
                        role: Role::Use,
                        class,
                    },
                    e.span.clone(),
                    Some(parent),
                    Some(stmt),
                    block,
                );
            }
            ExprKind::Var(name) => self.use_name(name, e.span.clone(), parent, stmt, block),
            ExprKind::Call { callee, arg } => {
                let callee = match callee {
                    Callee::Func(f) => Some(f.clone()),
                    Callee::Hole(_) => None,
                };
                let id = self.add(
                    NodeKind::Call { callee },
                    e.span.clone(),
                    Some(parent),
                    Some(stmt),
                    block,
                );
                if let Some(a) = arg {
                    self.expr(a, id, stmt, block, holes);
                }
            }
            ExprKind::Binary { op, lhs, rhs } => {
                let id = self.add(
                    NodeKind::Binary(*op),
                    e.span.clone(),
                    Some(parent),
                    Some(stmt),
                    block,
                );
                self.expr(lhs, id, stmt, block, holes);
                self.expr(rhs, id, stmt, block, holes);
            }
        }
    }

    /// Builds a block and returns (first statement, statements that fall
    /// through to whatever follows the block).
    fn block(
        &mut self,
        stmts: &[Stmt],
        parent: NodeId,
        block: usize,
        holes: &[(usize, HoleClass)],
    ) -> (Option<NodeId>, Vec<NodeId>) {
        let mut first = None;
        let mut exits: Vec<NodeId> = Vec::new();
        for s in stmts {
            let (id, out) = self.stmt(s, parent, block, holes);
            for &e in &exits {
                self.graph.cfg.push((e, id));
            }
            first.get_or_insert(id);
            exits = out;
        }
        (first, exits)
    }

    fn stmt(
        &mut self,
        s: &Stmt,
        parent: NodeId,
        block: usize,
        holes: &[(usize, HoleClass)],
    ) -> (NodeId, Vec<NodeId>) {
        let kind = match &s.kind {
            StmtKind::Let { .. } => StatementKind::Let,
            StmtKind::Assign { .. } => StatementKind::Assign,
            StmtKind::Call(_) => StatementKind::Call,
            StmtKind::Guard { .. } => StatementKind::Guard,
            StmtKind::If { .. } => StatementKind::If,
            StmtKind::Opaque => StatementKind::Opaque,
        };
        let id = self.add(NodeKind::Statement(kind), s.span.clone(), Some(parent), None, block);
        match &s.kind {
            StmtKind::Let {
                target,
                target_span,
                value,
            } => {
                self.expr(value, id, id, block, holes);
                self.def_name(target, target_span.clone(), id, block, true);
            }
            StmtKind::Assign {
                target,
                target_span,
                value,
            } => {
                self.expr(value, id, id, block, holes);
                self.def_name(target, target_span.clone(), id, block, false);
            }
            StmtKind::Call(e) => self.expr(e, id, id, block, holes),
            StmtKind::Guard { target, target_span } => {
                self.use_name(target, target_span.clone(), id, id, block)
            }
            StmtKind::If { cond, body } => {
                self.expr(cond, id, id, block, holes);
                let inner = self.next_block;
                self.next_block += 1;
                let before = self.scopes.clone();
                self.scopes.push(HashMap::new());
                let (first, exits) = self.block(body, id, inner, holes);
                self.scopes.pop();
                // Outer names reassigned in the body reach both ways.
                for (scope, old) in self.scopes.iter_mut().zip(before) {
                    for (name, defs) in old {
                        scope.entry(name).or_default().extend(defs);
                    }
                }
                if let Some(f) = first {
                    self.graph.cfg.push((id, f));
                }
                let mut out = exits;
                out.push(id);
                return (id, out);
            }
            StmtKind::Opaque => {}
        }
        (id, vec![id])
    }
}

pub fn build_graph(program: &Program) -> ProgramGraph {
    let mut b = Builder {
        graph: ProgramGraph {
            len: program.len,
            ..Default::default()
        },
        scopes: vec![HashMap::new()],
        next_block: 1,
    };
    let span = 0..program.len;
    let root = b.add(NodeKind::Program, span, None, None, 0);
    let holes: Vec<(usize, HoleClass)> =
        program.holes.iter().map(|h| (h.position, h.class)).collect();
    b.block(&program.stmts, root, 0, &holes);
    b.graph
}

/// Hole-tolerant parse of a possibly masked token sequence plus its graph.
pub fn parse_tolerant(tokens: &[TokenId]) -> (Program, ProgramGraph) {
    let program = parse_tolerant_program(tokens);
    let graph = build_graph(&program);
    (program, graph)
}

/// Parses and annotates in one go.
pub fn build_dfg_witness_inputs(graph: &ProgramGraph, registry: &FunctionRegistry) -> ProgramGraph {
    let mut g = graph.clone();
    g.annotate(registry);
    g
}
