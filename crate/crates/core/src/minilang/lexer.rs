use std::sync::OnceLock;

use crate::diffusion::{TokenId, Vocabulary};
use crate::error::{CdcError, Result};

pub const MASK: &str = "[MASK]";
/// Line break / blank slot. Rendered as `\n` in program text.
pub const NEWLINE: &str = "<nl>";

pub const IDENTIFIERS: [&str; 8] = ["a", "b", "c", "d", "w", "x", "y", "z"];
pub const FUNCTIONS: [&str; 6] = ["input", "exec", "query", "escape", "inc", "dbl"];
pub const HINT_WORDS: [&str; 3] = ["hint", "sanitize", "guard"];

const KEYWORDS: [&str; 3] = ["let", "if", "check"];
const PUNCT: [&str; 9] = ["=", ";", "(", ")", "{", "}", "+", "-", "*"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Keyword {
    Let,
    If,
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Punct {
    Assign,
    Semi,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Plus,
    Minus,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokClass {
    Keyword(Keyword),
    Punct(Punct),
    Ident,
    Literal(i64),
    Func,
    Newline,
    Hint,
    Mask,
}

pub fn vocab() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let digits: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        let tokens: Vec<String> = KEYWORDS
            .iter()
            .chain(PUNCT.iter())
            .chain(IDENTIFIERS.iter())
            .map(|s| s.to_string())
            .chain(digits)
            .chain(FUNCTIONS.iter().map(|s| s.to_string()))
            .chain(std::iter::once(NEWLINE.to_string()))
            .chain(HINT_WORDS.iter().map(|s| s.to_string()))
            .chain(std::iter::once(MASK.to_string()))
            .collect();
        Vocabulary::new(tokens, MASK).expect("static vocabulary is valid")
    })
}

/// Looks up a token id that is known to exist.
pub fn tok(s: &str) -> TokenId {
    vocab()
        .id(s)
        .unwrap_or_else(|| panic!("{s:?} is not a MiniLang token"))
}

pub fn mask_id() -> TokenId {
    vocab().mask_id()
}

pub fn newline_id() -> TokenId {
    tok(NEWLINE)
}

pub fn class_of(id: TokenId) -> TokClass {
    static CLASSES: OnceLock<Vec<TokClass>> = OnceLock::new();
    CLASSES.get_or_init(|| {
        vocab()
            .tokens()
            .iter()
            .map(|s| classify(s))
            .collect()
    })[id]
}

fn classify(s: &str) -> TokClass {
    match s {
        "let" => TokClass::Keyword(Keyword::Let),
        "if" => TokClass::Keyword(Keyword::If),
        "check" => TokClass::Keyword(Keyword::Check),
        "=" => TokClass::Punct(Punct::Assign),
        ";" => TokClass::Punct(Punct::Semi),
        "(" => TokClass::Punct(Punct::LParen),
        ")" => TokClass::Punct(Punct::RParen),
        "{" => TokClass::Punct(Punct::LBrace),
        "}" => TokClass::Punct(Punct::RBrace),
        "+" => TokClass::Punct(Punct::Plus),
        "-" => TokClass::Punct(Punct::Minus),
        "*" => TokClass::Punct(Punct::Star),
        NEWLINE => TokClass::Newline,
        MASK => TokClass::Mask,
        _ if IDENTIFIERS.contains(&s) => TokClass::Ident,
        _ if FUNCTIONS.contains(&s) => TokClass::Func,
        _ if HINT_WORDS.contains(&s) => TokClass::Hint,
        _ => TokClass::Literal(s.parse().expect("remaining tokens are digits")),
    }
}

/// Splits program text into vocabulary tokens. Newlines become `<nl>` tokens.
pub fn lex(text: &str) -> Result<Vec<TokenId>> {
    let v = vocab();
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == '\n' {
            out.push(newline_id());
            i += 1;
        } else if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphanumeric() || c == '_' || c == '[' {
            let start = i;
            if c == '[' {
                while i < bytes.len() && bytes[i] != b']' {
                    i += 1;
                }
                i = (i + 1).min(bytes.len());
            } else {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
            }
            let word = &text[start..i];
            let id = v.id(word).ok_or_else(|| CdcError::Lex {
                position: start,
                lexeme: word.to_string(),
            })?;
            out.push(id);
        } else {
            let end = i + c.len_utf8();
            let lexeme = &text[i..end];
            match v.id(lexeme) {
                Some(id) if PUNCT.contains(&lexeme) => out.push(id),
                _ => {
                    let mut stop = end;
                    while stop < bytes.len()
                        && !(bytes[stop] as char).is_whitespace()
                        && !(bytes[stop] as char).is_ascii_alphanumeric()
                    {
                        stop += 1;
                    }
                    return Err(CdcError::Lex {
                        position: i,
                        lexeme: text[i..stop.max(end)].to_string(),
                    });
                }
            }
            i = end;
        }
    }
    Ok(out)
}

/// Renders tokens as text: space-separated, `<nl>` as a line break.
pub fn detok(tokens: &[TokenId]) -> String {
    let v = vocab();
    let nl = newline_id();
    let mut out = String::new();
    for &t in tokens {
        if t == nl {
            out.push('\n');
            continue;
        }
        if !(out.is_empty() || out.ends_with('\n')) {
            out.push(' ');
        }
        out.push_str(v.token(t));
    }
    out
}

/// Canonical text form: tokens separated by single spaces, line breaks kept.
pub fn normalize(text: &str) -> Result<String> {
    Ok(detok(&lex(text)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexes_a_binding() {
        let toks = lex("let a = 1 ;").unwrap();
        let names: Vec<&str> = toks.iter().map(|&t| vocab().token(t)).collect();
        assert_eq!(names, ["let", "a", "=", "1", ";"]);
    }

    #[test]
    fn unknown_lexeme_is_an_error() {
        match lex("let a = @@ ;") {
            Err(CdcError::Lex { position, lexeme }) => {
                assert_eq!(position, 8);
                assert_eq!(lexeme, "@@");
            }
            other => panic!("expected lex error, got {other:?}"),
        }
        assert!(lex("@@").is_err());
        assert!(lex("let q = 12 ;").is_err());
    }

    #[test]
    fn compact_text_normalizes() {
        assert_eq!(normalize("let a=1;\nexec(a);").unwrap(), "let a = 1 ;\nexec ( a ) ;");
        assert_eq!(normalize("  let   a = [MASK] ;").unwrap(), "let a = [MASK] ;");
    }

    #[test]
    fn every_token_classifies() {
        for id in 0..vocab().len() {
            let _ = class_of(id);
        }
        assert_eq!(class_of(tok("7")), TokClass::Literal(7));
        assert_eq!(class_of(mask_id()), TokClass::Mask);
        assert_eq!(vocab().len(), 41);
    }
}
