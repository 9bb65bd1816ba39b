//! MiniLang: a tiny loop-free language with sources, sinks and sanitizers.

pub mod corpus;
pub mod graph;
pub mod interp;
pub mod lexer;
pub mod parser;
pub mod registry;

pub use corpus::{gen_corpus, Corpus, CorpusConfig, CorpusKind, Labels, Vulnerability};
pub use graph::{build_dfg_witness_inputs, build_graph, parse_tolerant, NodeId, NodeKind, ProgramGraph};
pub use interp::{interpret, run_tokens, FunctionalTask, Outputs, RuntimeError};
pub use lexer::{detok, lex, mask_id, newline_id, normalize, tok, vocab};
pub use parser::{parse_program, parse_strict, parse_tolerant_program, Program};
pub use registry::{FunctionRegistry, SecurityClass};
